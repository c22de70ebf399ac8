#include "avm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "avm/avmd.hpp"

namespace avm {

using nlohmann::json;

void TrainConfig::validate() const {
    if (batch_size < 1 || max_epochs < 1 || plateau_patience < 1)
        throw ConfigError("train: batch_size, max_epochs, plateau_patience must be >= 1");
    if (!(lr > 0.0) || !(weight_decay >= 0.0) || !(loss_eps > 0.0))
        throw ConfigError("train: lr, weight_decay, loss_eps must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0))
        throw ConfigError("train: lr_decay_factor must be in (0,1)");
}

Tensor poisson_loss(const Tensor& responses, const Tensor& predictions, double eps) {
    if (responses.shape() != predictions.shape())
        throw std::invalid_argument("poisson_loss: shape mismatch " +
                                    shape_str(responses.shape()) + " vs " +
                                    shape_str(predictions.shape()));
    for (double v : predictions.values())
        if (!(v > 0.0))
            throw std::invalid_argument("poisson_loss: non-positive prediction " +
                                        std::to_string(v));
    Tensor guarded = add_scalar(predictions, eps);
    return sum_all(sub(predictions, mul(responses, log(guarded))));
}

double poisson_loss_value(std::span<const double> responses, std::span<const double> predictions,
                          double eps) {
    double acc = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i)
        acc += predictions[i] - responses[i] * std::log(predictions[i] + eps);
    return acc;
}

// ------------------------------------------------------------------ AdamW

AdamW::AdamW(std::vector<NamedParam> params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
    for (const auto& np : params_) {
        if (!np.tensor.requires_grad())
            throw std::logic_error("adamw: frozen parameter '" + np.name + "' passed in");
        m_.emplace_back(np.tensor.numel(), 0.0);
        v_.emplace_back(np.tensor.numel(), 0.0);
    }
}

void AdamW::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_count_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        auto theta = params_[p].tensor.values();
        auto grad = params_[p].tensor.grad();
        auto& m = m_[p];
        auto& v = v_[p];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i];
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= lr_ * mhat / (std::sqrt(vhat) + kEps) + lr_ * weight_decay_ * theta[i];
        }
    }
}

void AdamW::zero_grad() {
    for (auto& np : params_) const_cast<Tensor&>(np.tensor).zero_grad();
}

std::map<std::string, std::vector<double>> AdamW::first_moments() const {
    std::map<std::string, std::vector<double>> out;
    for (std::size_t p = 0; p < params_.size(); ++p) out[params_[p].name] = m_[p];
    return out;
}

std::map<std::string, std::vector<double>> AdamW::second_moments() const {
    std::map<std::string, std::vector<double>> out;
    for (std::size_t p = 0; p < params_.size(); ++p) out[params_[p].name] = v_[p];
    return out;
}

void AdamW::restore(const std::map<std::string, std::vector<double>>& m,
                    const std::map<std::string, std::vector<double>>& v,
                    std::uint64_t step_count) {
    for (std::size_t p = 0; p < params_.size(); ++p) {
        const auto& name = params_[p].name;
        auto mi = m.find(name);
        auto vi = v.find(name);
        if (mi == m.end() || vi == v.end())
            throw std::runtime_error("adamw: missing optimizer state for '" + name + "'");
        m_[p] = mi->second;
        v_[p] = vi->second;
    }
    step_count_ = step_count;
}

// -------------------------------------------------------------- scheduler

SchedulerDecision lr_schedule_step(const std::vector<double>& val_history,
                                   const TrainConfig& cfg) {
    if (val_history.empty()) throw std::invalid_argument("scheduler: empty history");
    SchedulerDecision out;
    double best = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    std::size_t decays = 0;
    SchedulerAction last = SchedulerAction::keep;
    for (double loss : val_history) {
        last = SchedulerAction::keep;
        if (loss < best - cfg.plateau_improvement) {
            best = loss;
            stale = 0;
        } else {
            ++stale;
        }
        if (stale >= cfg.plateau_patience) {
            stale = 0;
            if (decays < cfg.max_decays_before_stop) {
                ++decays;
                last = SchedulerAction::decay;
            } else {
                last = SchedulerAction::stop;
            }
        }
    }
    out.action = last;
    out.decays = decays;
    out.lr = cfg.lr * std::pow(cfg.lr_decay_factor, static_cast<double>(decays));
    return out;
}

void write_train_log(const std::vector<LogRow>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("train log: cannot write " + path);
    f << "epoch,split,loss,lr,seconds\n";
    char buf[160];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.3f\n", row.epoch, row.split.c_str(),
                      row.loss, row.lr, row.seconds);
        f << buf;
    }
}

// -------------------------------------------------------------- Trainer

namespace {

std::uint64_t tagged(std::uint64_t seed, std::uint64_t tag) {
    return mix64(seed ^ (tag * 0x9e3779b97f4a7c15ULL));
}

Tensor image_leaf(const DatasetBundle& data, std::size_t image) {
    Tensor t = Tensor::leaf({data.image_h, data.image_w});
    const double* src = data.image(image);
    std::copy(src, src + data.image_h * data.image_w, t.values().begin());
    return t;
}

Tensor behavior_leaf(const DatasetBundle& data, std::size_t image, std::size_t repeat) {
    Tensor t = Tensor::leaf({data.behavior_dim});
    const double* src = data.trial_behavior(image, repeat);
    std::copy(src, src + data.behavior_dim, t.values().begin());
    return t;
}

std::map<std::string, std::vector<double>> snapshot_params(const Model& model) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& np : model.named_params())
        out[np.name] = {np.tensor.values().begin(), np.tensor.values().end()};
    return out;
}

std::vector<NamedParam> trainables_under(Model& model, const FreezePlan& plan) {
    model.apply(plan);
    return model.trainable_params();
}

}  // namespace

Trainer::Trainer(Model& model, const DatasetBundle& data, TrainConfig cfg, FreezePlan plan)
    : model_(model),
      data_(data),
      cfg_(cfg),
      plan_(plan),
      optimizer_(trainables_under(model, plan), cfg.lr, cfg.weight_decay),
      jitter_rng_(tagged(cfg.seed, 0x4a49)),
      best_val_loss_(std::numeric_limits<double>::infinity()) {
    cfg_.validate();
    if (data_.splits.train.empty() || data_.splits.val.empty())
        throw ConfigError("trainer: dataset must provide train and val splits");
    if (data_.num_neurons() != model_.spec().readout.num_neurons)
        throw ConfigError("trainer: dataset has " + std::to_string(data_.num_neurons()) +
                          " neurons but the readout expects " +
                          std::to_string(model_.spec().readout.num_neurons));
}

double Trainer::split_loss(const std::vector<std::size_t>& image_ids) const {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t id : image_ids) {
        Tensor img = image_leaf(data_, id);
        for (std::size_t j = 0; j < data_.repeats[id]; ++j) {
            Tensor beh = behavior_leaf(data_, id, j);
            Tensor pred = model_.forward(img, beh, ReadoutMode::eval);
            const double* resp = data_.responses.data().data() +
                                 data_.responses.trial_index(id, j) * data_.num_neurons();
            acc += poisson_loss_value({resp, data_.num_neurons()},
                                      {pred.values().data(), pred.numel()}, cfg_.loss_eps);
            count += data_.num_neurons();
        }
    }
    return acc / static_cast<double>(count);
}

Tensor Trainer::batch_loss(const std::vector<std::pair<std::size_t, std::size_t>>& trials) {
    std::vector<Tensor> rows;
    rows.reserve(trials.size());
    Tensor resp = Tensor::leaf({trials.size(), data_.num_neurons()});
    for (std::size_t t = 0; t < trials.size(); ++t) {
        const auto [image, repeat] = trials[t];
        Tensor img = image_leaf(data_, image);
        Tensor beh = behavior_leaf(data_, image, repeat);
        Tensor pred = model_.forward(img, beh, ReadoutMode::train, &jitter_rng_);
        rows.push_back(reshape(pred, {1, data_.num_neurons()}));
        const double* src = data_.responses.data().data() +
                            data_.responses.trial_index(image, repeat) * data_.num_neurons();
        std::copy(src, src + data_.num_neurons(),
                  resp.values().begin() + static_cast<std::ptrdiff_t>(t * data_.num_neurons()));
    }
    Tensor preds = trials.size() == 1 ? rows[0] : concat_rows(rows);
    return poisson_loss(resp, preds, cfg_.loss_eps);
}

Trainer::EpochOutcome Trainer::run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    ++epoch_;

    // shuffled trial order is a pure function of (seed, epoch)
    std::vector<std::pair<std::size_t, std::size_t>> trials;
    for (std::size_t id : data_.splits.train)
        for (std::size_t j = 0; j < data_.repeats[id]; ++j) trials.emplace_back(id, j);
    Rng shuffle_rng = keyed_rng(tagged(cfg_.seed, 0x5348), epoch_);
    for (std::size_t i = trials.size() - 1; i > 0; --i)
        std::swap(trials[i], trials[shuffle_rng.next_u64() % (i + 1)]);

    double train_sum = 0.0;
    std::size_t train_count = 0;
    for (std::size_t begin = 0; begin < trials.size(); begin += cfg_.batch_size) {
        const std::size_t end = std::min(begin + cfg_.batch_size, trials.size());
        std::vector<std::pair<std::size_t, std::size_t>> batch(trials.begin() + begin,
                                                               trials.begin() + end);
        Tape tape;
        {
            TapeScope scope(tape);
            optimizer_.zero_grad();
            Tensor loss = batch_loss(batch);
            const double value = loss.item();
            if (!std::isfinite(value))
                throw DivergenceError("training diverged: non-finite batch loss at epoch " +
                                      std::to_string(epoch_));
            train_sum += value;
            train_count += batch.size() * data_.num_neurons();
            tape.backward(loss);
        }
        optimizer_.step();
        model_.readout().clamp_mu();
    }

    const double val = split_loss(data_.splits.val);
    if (!std::isfinite(val))
        throw DivergenceError("training diverged: non-finite validation loss at epoch " +
                              std::to_string(epoch_));
    val_history_.push_back(val);
    const SchedulerDecision decision = lr_schedule_step(val_history_, cfg_);
    optimizer_.set_lr(decision.lr);

    if (val < best_val_loss_) {
        best_val_loss_ = val;
        best_params_ = snapshot_params(model_);
    }

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EpochOutcome out;
    out.train_loss = train_sum / static_cast<double>(train_count);
    out.val_loss = val;
    out.action = decision.action;
    log_.push_back({epoch_, "train", out.train_loss, optimizer_.lr(), seconds});
    log_.push_back({epoch_, "val", out.val_loss, optimizer_.lr(), 0.0});
    return out;
}

Trainer::RunResult Trainer::run() {
    // epoch-0 validation: phase 2 starts exactly at the frozen model's loss
    const double initial_val = split_loss(data_.splits.val);
    log_.push_back({0, "val", initial_val, cfg_.lr, 0.0});
    best_val_loss_ = initial_val;
    best_params_ = snapshot_params(model_);

    while (epoch_ < cfg_.max_epochs) {
        const EpochOutcome out = run_epoch();
        if (out.action == SchedulerAction::stop) break;
    }

    RunResult result;
    result.checkpoint = snapshot();
    result.checkpoint.params = best_params_;
    result.checkpoint.finalized = true;
    result.log = log_;
    return result;
}

Checkpoint Trainer::snapshot() const {
    Checkpoint ck;
    ck.spec = model_.spec();
    ck.params = snapshot_params(model_);
    ck.best_params = best_params_;
    ck.opt_m = optimizer_.first_moments();
    ck.opt_v = optimizer_.second_moments();
    ck.opt_step = optimizer_.step_count();
    ck.epoch = epoch_;
    ck.best_val_loss = best_val_loss_;
    ck.val_history = val_history_;
    ck.rng_state = jitter_rng_.state();
    ck.phase = plan_.phase == FreezePlan::Phase::phase1 ? "phase1" : "phase2";
    return ck;
}

void Trainer::restore(const Checkpoint& ck) {
    model_.load_values(ck.params);
    optimizer_.restore(ck.opt_m, ck.opt_v, ck.opt_step);
    epoch_ = ck.epoch;
    best_val_loss_ = ck.best_val_loss;
    best_params_ = ck.best_params;
    val_history_ = ck.val_history;
    jitter_rng_.restore(ck.rng_state);
    if (!val_history_.empty())
        optimizer_.set_lr(lr_schedule_step(val_history_, cfg_).lr);
}

// ------------------------------------------------------------ checkpoints

void Checkpoint::save(const std::string& dir) const {
    AvmdWriter w;
    for (const auto& [name, values] : params)
        w.add("param/" + name, {values.size()}, values);
    for (const auto& [name, values] : best_params)
        w.add("best/" + name, {values.size()}, values);
    for (const auto& [name, values] : opt_m) w.add("optm/" + name, {values.size()}, values);
    for (const auto& [name, values] : opt_v) w.add("optv/" + name, {values.size()}, values);
    if (!val_history.empty()) w.add("val_history", {val_history.size()}, val_history);

    json meta;
    meta["kind"] = "checkpoint";
    meta["spec"] = json::parse(spec.to_json());
    meta["epoch"] = epoch;
    meta["best_val_loss"] = best_val_loss;
    meta["opt_step"] = opt_step;
    meta["phase"] = phase;
    meta["finalized"] = finalized;
    meta["rng"] = {{"key", std::to_string(rng_state.key)},
                   {"counter", std::to_string(rng_state.counter)},
                   {"has_cached_normal", rng_state.has_cached_normal},
                   {"cached_normal", rng_state.cached_normal}};
    w.set_meta(meta.dump());
    w.write(dir);
}

Checkpoint Checkpoint::load(const std::string& dir) {
    AvmdReader r(dir);
    json meta = json::parse(r.meta_json());
    if (meta.value("kind", "") != "checkpoint")
        throw AvmdFormatError("checkpoint: " + dir + " is not a checkpoint container");
    Checkpoint ck;
    ck.spec = ModelSpec::from_json(meta.at("spec").dump());
    ck.epoch = meta.at("epoch");
    ck.best_val_loss = meta.at("best_val_loss");
    ck.opt_step = meta.at("opt_step");
    ck.phase = meta.at("phase");
    ck.finalized = meta.at("finalized");
    ck.rng_state.key = std::stoull(meta.at("rng").at("key").get<std::string>());
    ck.rng_state.counter = std::stoull(meta.at("rng").at("counter").get<std::string>());
    ck.rng_state.has_cached_normal = meta.at("rng").at("has_cached_normal");
    ck.rng_state.cached_normal = meta.at("rng").at("cached_normal");
    for (const auto& name : r.names()) {
        auto values = r.read(name);
        if (name.rfind("param/", 0) == 0)
            ck.params[name.substr(6)] = std::move(values);
        else if (name.rfind("best/", 0) == 0)
            ck.best_params[name.substr(5)] = std::move(values);
        else if (name.rfind("optm/", 0) == 0)
            ck.opt_m[name.substr(5)] = std::move(values);
        else if (name.rfind("optv/", 0) == 0)
            ck.opt_v[name.substr(5)] = std::move(values);
        else if (name == "val_history")
            ck.val_history = std::move(values);
    }
    return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
    Model m(ck.spec);
    m.load_values(ck.params);
    return m;
}

// ----------------------------------------------------------------- phases

TrainResult train_phase1(Model& model, const DatasetBundle& data, const TrainConfig& cfg) {
    Trainer trainer(model, data, cfg, FreezePlan::for_phase1());
    auto result = trainer.run();
    return {std::move(result.checkpoint), std::move(result.log)};
}

TrainResult train_phase2(Model& model, const DatasetBundle& data, const TrainConfig& cfg) {
    if (model.modulation().enabled())
        model.modulation().zero_init(tagged(cfg.seed, 0x5a49));
    const std::uint64_t backbone_before = model.group_hash(ParamGroup::backbone);
    Trainer trainer(model, data, cfg,
                    FreezePlan::for_phase2(model.spec().readout_trainable_phase2));
    auto result = trainer.run();
    if (model.group_hash(ParamGroup::backbone) != backbone_before)
        throw InvariantBreach("phase 2 mutated the frozen backbone");
    result.checkpoint.phase = "phase2";
    return {std::move(result.checkpoint), std::move(result.log)};
}

}  // namespace avm
