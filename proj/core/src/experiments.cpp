#include "avm/experiments.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "avm/svg.hpp"

namespace avm {

namespace {

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

std::vector<std::size_t> split_repeats(const DatasetBundle& data,
                                       const std::vector<std::size_t>& ids) {
    std::vector<std::size_t> reps;
    reps.reserve(ids.size());
    for (std::size_t id : ids) reps.push_back(data.repeats[id]);
    return reps;
}

}  // namespace

TrialTensor predict_split(const Model& model, const DatasetBundle& data,
                          const std::vector<std::size_t>& image_ids) {
    TrialTensor out(split_repeats(data, image_ids), data.num_neurons(),
                    TrialTensor::Kind::prediction);
    for (std::size_t k = 0; k < image_ids.size(); ++k) {
        const std::size_t id = image_ids[k];
        Tensor img = image_leaf(data, id);
        for (std::size_t j = 0; j < data.repeats[id]; ++j) {
            Tensor beh = behavior_leaf(data, id, j);
            Tensor pred = model.forward(img, beh, ReadoutMode::eval);
            for (std::size_t n = 0; n < data.num_neurons(); ++n)
                out.at(k, j, n) = pred.at(n);
        }
    }
    return out;
}

TrialTensor responses_for_split(const DatasetBundle& data,
                                const std::vector<std::size_t>& image_ids) {
    TrialTensor out(split_repeats(data, image_ids), data.num_neurons());
    for (std::size_t k = 0; k < image_ids.size(); ++k) {
        const std::size_t id = image_ids[k];
        for (std::size_t j = 0; j < data.repeats[id]; ++j)
            for (std::size_t n = 0; n < data.num_neurons(); ++n)
                out.at(k, j, n) = data.responses.at(id, j, n);
    }
    return out;
}

namespace {

double mean_split_loss(const Model& model, const DatasetBundle& data,
                       const std::vector<std::size_t>& ids, double eps) {
    if (ids.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t id : ids) {
        Tensor img = image_leaf(data, id);
        for (std::size_t j = 0; j < data.repeats[id]; ++j) {
            Tensor beh = behavior_leaf(data, id, j);
            Tensor pred = model.forward(img, beh, ReadoutMode::eval);
            const double* resp = data.responses.data().data() +
                                 data.responses.trial_index(id, j) * data.num_neurons();
            acc += poisson_loss_value({resp, data.num_neurons()},
                                      {pred.values().data(), pred.numel()}, eps);
            count += data.num_neurons();
        }
    }
    return acc / static_cast<double>(count);
}

}  // namespace

EvalResult evaluate_model(const Model& model, const DatasetBundle& data, double loss_eps) {
    if (data.splits.test.empty()) throw ConfigError("evaluate: dataset has no test split");
    EvalResult out;
    TrialTensor r = responses_for_split(data, data.splits.test);
    TrialTensor o = predict_split(model, data, data.splits.test);
    out.report = compute_metrics(r, o);
    out.val_loss = mean_split_loss(model, data, data.splits.val, loss_eps);
    out.test_loss = mean_split_loss(model, data, data.splits.test, loss_eps);
    return out;
}

// ------------------------------------------------------- split and merge

namespace {

DatasetBundle subset_bundle(const DatasetBundle& src, const std::vector<std::size_t>& ids,
                            int which) {
    DatasetBundle out;
    out.image_h = src.image_h;
    out.image_w = src.image_w;
    out.behavior_dim = src.behavior_dim;
    out.provenance = src.provenance;
    out.response_seed = src.response_seed;
    out.repeats = split_repeats(src, ids);
    out.responses = TrialTensor(out.repeats, src.num_neurons());
    const std::size_t pixels = src.image_h * src.image_w;
    out.stimuli.resize(ids.size() * pixels);
    std::size_t trial = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const std::size_t id = ids[k];
        std::copy(src.image(id), src.image(id) + pixels, out.stimuli.begin() + k * pixels);
        for (std::size_t j = 0; j < src.repeats[id]; ++j, ++trial) {
            const double* beh = src.trial_behavior(id, j);
            out.behavior.insert(out.behavior.end(), beh, beh + src.behavior_dim);
            for (std::size_t n = 0; n < src.num_neurons(); ++n)
                out.responses.at(k, j, n) = src.responses.at(id, j, n);
        }
    }
    std::vector<std::size_t> all(ids.size());
    std::iota(all.begin(), all.end(), 0);
    if (which == 0) out.splits.train = all;
    if (which == 1) out.splits.val = all;
    if (which == 2) out.splits.test = all;
    return out;
}

}  // namespace

SplitBundles split_bundle(const DatasetBundle& bundle) {
    return {subset_bundle(bundle, bundle.splits.train, 0),
            subset_bundle(bundle, bundle.splits.val, 1),
            subset_bundle(bundle, bundle.splits.test, 2)};
}

DatasetBundle merge_bundles(const DatasetBundle& train, const DatasetBundle& val,
                            const DatasetBundle& test) {
    for (const DatasetBundle* b : {&val, &test})
        if (b->image_h != train.image_h || b->image_w != train.image_w ||
            b->behavior_dim != train.behavior_dim ||
            b->num_neurons() != train.num_neurons() || b->provenance != train.provenance)
            throw ConfigError("merge_bundles: bundles disagree on geometry or provenance");

    DatasetBundle out;
    out.image_h = train.image_h;
    out.image_w = train.image_w;
    out.behavior_dim = train.behavior_dim;
    out.provenance = train.provenance;
    out.response_seed = train.response_seed;

    auto append = [&out](const DatasetBundle& b, std::vector<std::size_t>& split_ids) {
        const std::size_t base = out.repeats.size();
        for (std::size_t i = 0; i < b.num_images(); ++i) split_ids.push_back(base + i);
        out.repeats.insert(out.repeats.end(), b.repeats.begin(), b.repeats.end());
        out.stimuli.insert(out.stimuli.end(), b.stimuli.begin(), b.stimuli.end());
        out.behavior.insert(out.behavior.end(), b.behavior.begin(), b.behavior.end());
    };
    append(train, out.splits.train);
    append(val, out.splits.val);
    append(test, out.splits.test);

    out.responses = TrialTensor(out.repeats, train.num_neurons());
    auto& dst = out.responses.data();
    std::size_t offset = 0;
    for (const DatasetBundle* b : {&train, &val, &test}) {
        const auto& src = b->responses.data();
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += src.size();
    }
    out.validate();
    return out;
}

// ------------------------------------------------------------ adaptation

const char* strategy_name(AdaptStrategy s) {
    switch (s) {
        case AdaptStrategy::avm: return "avm";
        case AdaptStrategy::avm_s: return "avm-s";
        case AdaptStrategy::avm_b: return "avm-b";
        case AdaptStrategy::full_ft: return "full-ft";
        case AdaptStrategy::frozen: return "frozen";
    }
    return "?";
}

AdaptStrategy strategy_from_name(const std::string& name) {
    if (name == "avm") return AdaptStrategy::avm;
    if (name == "avm-s" || name == "avm_s") return AdaptStrategy::avm_s;
    if (name == "avm-b" || name == "avm_b") return AdaptStrategy::avm_b;
    if (name == "full-ft" || name == "full_ft") return AdaptStrategy::full_ft;
    if (name == "frozen") return AdaptStrategy::frozen;
    throw ConfigError("unknown adaptation strategy '" + name + "'");
}

AdaptOutcome run_adaptation(const Checkpoint& base, AdaptStrategy strategy,
                            const DatasetBundle& new_data, TrainConfig train_cfg,
                            CamuConfig camu_cfg) {
    AdaptOutcome out;

    if (strategy == AdaptStrategy::frozen) {
        Model model = model_from_checkpoint(base);
        out.checkpoint = base;
        out.checkpoint.phase = "phase2";
        out.trainable_params = 0;
        out.eval = evaluate_model(model, new_data, train_cfg.loss_eps);
        out.step0_val_loss = out.eval.val_loss;
        out.log.push_back({0, "val", out.step0_val_loss, 0.0, 0.0});
        return out;
    }

    ModelSpec spec = base.spec;
    switch (strategy) {
        case AdaptStrategy::avm: spec.variant = VariantKind::avm; break;
        case AdaptStrategy::avm_s: spec.variant = VariantKind::avm_s; break;
        case AdaptStrategy::avm_b: spec.variant = VariantKind::avm_b; break;
        default: spec.variant = VariantKind::plain; break;
    }
    spec.camu = camu_cfg;

    Model model(spec);
    // carry over every phase-1 parameter; fresh modulation stays out of the map
    auto params = base.params;
    for (auto& np : model.named_params()) {
        auto it = params.find(np.name);
        if (it == params.end()) continue;
        auto vals = const_cast<Tensor&>(np.tensor).values();
        std::copy(it->second.begin(), it->second.end(), vals.begin());
    }

    TrainResult result = strategy == AdaptStrategy::full_ft
                             ? train_phase1(model, new_data, train_cfg)
                             : train_phase2(model, new_data, train_cfg);
    out.checkpoint = std::move(result.checkpoint);
    out.checkpoint.phase = "phase2";
    out.log = std::move(result.log);
    out.trainable_params = model.count_parameters(true);
    out.step0_val_loss = out.log.empty() ? 0.0 : out.log.front().loss;

    Model best = model_from_checkpoint(out.checkpoint);
    out.eval = evaluate_model(best, new_data, train_cfg.loss_eps);
    return out;
}

// -------------------------------------------------------------- ablation

std::vector<AblationCell> run_ablation(const Checkpoint& base, const DatasetBundle& data,
                                       const AblationGrid& grid, const TrainConfig& cfg,
                                       std::size_t workers) {
    std::vector<AblationCell> cells;
    for (double w : grid.weights)
        for (std::size_t m : grid.dims) {
            AblationCell c;
            c.weight = w;
            c.dim = m;
            cells.push_back(c);
        }

    auto run_cell = [&](AblationCell& cell) {
        const auto start = std::chrono::steady_clock::now();
        try {
            CamuConfig camu{cell.dim, cell.weight};
            AdaptOutcome outcome = run_adaptation(base, AdaptStrategy::avm, data, cfg, camu);
            cell.rho_trial = outcome.eval.report.rho_trial.aggregate;
            cell.rho_avg = outcome.eval.report.rho_avg.aggregate;
            cell.feve = outcome.eval.report.feve.aggregate;
            cell.trainable_params = outcome.trainable_params;
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
        }
        cell.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };

    if (workers <= 1) {
        for (auto& cell : cells) run_cell(cell);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
                    run_cell(cells[i]);
            });
        for (auto& th : pool) th.join();
    }
    return cells;
}

void write_ablation_csv(const std::vector<AblationCell>& cells, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("ablation: cannot write " + path);
    f << "weight,dim,rho_trial,rho_avg,feve,trainable_params,seconds\n";
    char buf[224];
    for (const auto& c : cells) {
        if (c.ok)
            std::snprintf(buf, sizeof buf, "%g,%zu,%.17g,%.17g,%.17g,%zu,%.3f\n", c.weight, c.dim,
                          c.rho_trial, c.rho_avg, c.feve, c.trainable_params, c.seconds);
        else
            std::snprintf(buf, sizeof buf, "%g,%zu,nan,nan,nan,0,%.3f\n", c.weight, c.dim,
                          c.seconds);
        f << buf;
    }
}

void write_ablation_svgs(const std::vector<AblationCell>& cells, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    struct MetricPick {
        const char* name;
        double AblationCell::*field;
    };
    const MetricPick metrics[] = {{"rho_trial", &AblationCell::rho_trial},
                                  {"rho_avg", &AblationCell::rho_avg},
                                  {"feve", &AblationCell::feve}};

    // collect the dim axis in grid order
    std::vector<std::size_t> dims;
    for (const auto& c : cells)
        if (std::find(dims.begin(), dims.end(), c.dim) == dims.end()) dims.push_back(c.dim);

    for (const auto& metric : metrics) {
        SvgChart chart("bottleneck dim", metric.name);
        std::vector<double> xs(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) xs[i] = static_cast<double>(dims[i]);

        std::vector<double> weights;
        for (const auto& c : cells)
            if (std::find(weights.begin(), weights.end(), c.weight) == weights.end())
                weights.push_back(c.weight);

        for (double w : weights) {
            std::vector<double> ys;
            for (std::size_t dim : dims) {
                double y = std::numeric_limits<double>::quiet_NaN();
                for (const auto& c : cells)
                    if (c.weight == w && c.dim == dim && c.ok) y = c.*(metric.field);
                ys.push_back(y);
            }
            char label[32];
            std::snprintf(label, sizeof label, "w=%g", w);
            chart.add_series(label, xs, ys);
        }
        chart.write((fs::path(dir) / (std::string(metric.name) + ".svg")).string());
    }
}

}  // namespace avm
