#include "avm/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "avm/avmd.hpp"
#include "avm/rng.hpp"

namespace avm {

using nlohmann::json;

namespace {

// stream tags; each stage of generation draws from its own keyed family
enum : std::uint64_t {
    kTagRf = 0x5246,
    kTagGain = 0x4741,
    kTagBaseline = 0x4241,
    kTagStimulus = 0x5354,
    kTagBehavior = 0x4245,
    kTagResponse = 0x5245,
    kTagSplit = 0x5350,
};

std::uint64_t tagged(std::uint64_t seed, std::uint64_t tag) { return mix64(seed ^ (tag * 0x9e3779b97f4a7c15ULL)); }

double softplus_scalar(double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace

void SyntheticWorldConfig::validate() const {
    if (num_neurons < 1) throw std::invalid_argument("world: num_neurons must be >= 1");
    if (image_h < 2 || image_w < 2) throw std::invalid_argument("world: image too small");
    if (num_train_images < 2) throw std::invalid_argument("world: need at least 2 train images");
    if (num_test_images < 1) throw std::invalid_argument("world: need at least 1 test image");
    if (test_repeats < 2) throw std::invalid_argument("world: test images need >= 2 repeats");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("world: val_fraction must be in (0,1)");
    if (!(stim_freq_lo > 0.0 && stim_freq_hi > stim_freq_lo))
        throw std::invalid_argument("world: bad stimulus frequency band");
}

std::string SyntheticWorldConfig::to_json() const {
    json j;
    j["num_neurons"] = num_neurons;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    j["behavior_dim"] = behavior_dim;
    j["num_train_images"] = num_train_images;
    j["num_test_images"] = num_test_images;
    j["test_repeats"] = test_repeats;
    j["val_fraction"] = val_fraction;
    j["stim_freq_lo"] = stim_freq_lo;
    j["stim_freq_hi"] = stim_freq_hi;
    j["gratings_per_image"] = gratings_per_image;
    j["gabor_gain"] = gabor_gain;
    j["behavior_gain"] = behavior_gain;
    j["baseline_lo"] = baseline_lo;
    j["baseline_hi"] = baseline_hi;
    j["poisson_sampling"] = poisson_sampling;
    j["seed"] = seed;
    return j.dump();
}

SyntheticWorldConfig SyntheticWorldConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    SyntheticWorldConfig c;
    c.num_neurons = j.at("num_neurons");
    c.image_h = j.at("image_h");
    c.image_w = j.at("image_w");
    c.behavior_dim = j.at("behavior_dim");
    c.num_train_images = j.at("num_train_images");
    c.num_test_images = j.at("num_test_images");
    c.test_repeats = j.at("test_repeats");
    c.val_fraction = j.at("val_fraction");
    c.stim_freq_lo = j.at("stim_freq_lo");
    c.stim_freq_hi = j.at("stim_freq_hi");
    c.gratings_per_image = j.at("gratings_per_image");
    c.gabor_gain = j.at("gabor_gain");
    c.behavior_gain = j.at("behavior_gain");
    c.baseline_lo = j.at("baseline_lo");
    c.baseline_hi = j.at("baseline_hi");
    c.poisson_sampling = j.at("poisson_sampling");
    c.seed = j.at("seed");
    return c;
}

std::uint64_t SyntheticWorldConfig::hash() const {
    const std::string text = to_json();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

World::World(SyntheticWorldConfig cfg, std::uint64_t rf_seed) : cfg_(cfg) {
    cfg_.validate();
    rfs_.resize(cfg_.num_neurons);
    gains_.resize(cfg_.num_neurons);
    baselines_.resize(cfg_.num_neurons);
    for (std::size_t n = 0; n < cfg_.num_neurons; ++n) {
        Rng rf_rng = keyed_rng(tagged(rf_seed, kTagRf), n);
        GaborParams& g = rfs_[n];
        g.center_x = rf_rng.uniform(-0.8, 0.8);
        g.center_y = rf_rng.uniform(-0.8, 0.8);
        g.orientation = rf_rng.uniform(0.0, M_PI);
        g.frequency = rf_rng.uniform(1.2, 3.2);
        g.sigma = rf_rng.uniform(0.18, 0.38);
        g.amplitude = rf_rng.uniform(0.8, 1.2);
        g.phase = rf_rng.uniform(0.0, 2.0 * M_PI);

        Rng gain_rng = keyed_rng(tagged(rf_seed, kTagGain), n);
        gains_[n].resize(cfg_.behavior_dim);
        for (auto& v : gains_[n]) v = cfg_.behavior_gain * gain_rng.normal();

        Rng base_rng = keyed_rng(tagged(rf_seed, kTagBaseline), n);
        baselines_[n] = base_rng.uniform(cfg_.baseline_lo, cfg_.baseline_hi);
    }
    build_fields();
}

void World::build_fields() {
    const std::size_t h = cfg_.image_h, w = cfg_.image_w;
    fields_.assign(cfg_.num_neurons, std::vector<double>(h * w, 0.0));
    for (std::size_t n = 0; n < cfg_.num_neurons; ++n) {
        const GaborParams& g = rfs_[n];
        auto& field = fields_[n];
        const double c = std::cos(g.orientation), s = std::sin(g.orientation);
        double norm = 0.0;
        for (std::size_t y = 0; y < h; ++y) {
            const double yn = -1.0 + 2.0 * static_cast<double>(y) / static_cast<double>(h - 1);
            for (std::size_t x = 0; x < w; ++x) {
                const double xn = -1.0 + 2.0 * static_cast<double>(x) / static_cast<double>(w - 1);
                const double dx = xn - g.center_x, dy = yn - g.center_y;
                const double u = dx * c + dy * s;
                const double v = -dx * s + dy * c;
                const double envelope = std::exp(-(u * u + v * v) / (2.0 * g.sigma * g.sigma));
                const double val =
                    g.amplitude * envelope * std::cos(2.0 * M_PI * g.frequency * u + g.phase);
                field[y * w + x] = val;
                norm += val * val;
            }
        }
        norm = std::sqrt(norm);
        if (norm > 1e-12)
            for (auto& v : field) v /= norm;
    }
}

double World::rate(const double* image, const double* behavior, std::size_t neuron) const {
    const auto& field = fields_[neuron];
    double drive = 0.0;
    for (std::size_t i = 0; i < field.size(); ++i) drive += field[i] * image[i];
    drive *= cfg_.gabor_gain;
    const auto& gain = gains_[neuron];
    for (std::size_t k = 0; k < gain.size(); ++k) drive += gain[k] * behavior[k];
    return softplus_scalar(drive + baselines_[neuron]);
}

void World::save(const std::string& dir) const {
    AvmdWriter w;
    std::vector<double> rf(cfg_.num_neurons * 7);
    for (std::size_t n = 0; n < cfg_.num_neurons; ++n) {
        const GaborParams& g = rfs_[n];
        double* row = rf.data() + n * 7;
        row[0] = g.center_x;
        row[1] = g.center_y;
        row[2] = g.orientation;
        row[3] = g.frequency;
        row[4] = g.sigma;
        row[5] = g.amplitude;
        row[6] = g.phase;
    }
    w.add("rf_params", {cfg_.num_neurons, 7}, rf);
    std::vector<double> gain(cfg_.num_neurons * cfg_.behavior_dim);
    for (std::size_t n = 0; n < cfg_.num_neurons; ++n)
        std::copy(gains_[n].begin(), gains_[n].end(), gain.begin() + n * cfg_.behavior_dim);
    w.add("behavior_gain", {cfg_.num_neurons, cfg_.behavior_dim}, gain);
    w.add("baseline", {cfg_.num_neurons}, baselines_);
    json meta;
    meta["kind"] = "world";
    meta["config"] = json::parse(cfg_.to_json());
    w.set_meta(meta.dump());
    w.write(dir);
}

World World::load(const std::string& dir) {
    AvmdReader r(dir);
    json meta = json::parse(r.meta_json());
    if (meta.value("kind", "") != "world")
        throw AvmdFormatError("world: " + dir + " is not a world sidecar");
    World w;
    w.cfg_ = SyntheticWorldConfig::from_json(meta.at("config").dump());
    const std::size_t n = w.cfg_.num_neurons;
    auto rf = r.read("rf_params");
    w.rfs_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = rf.data() + i * 7;
        w.rfs_[i] = {row[0], row[1], row[2], row[3], row[4], row[5], row[6]};
    }
    auto gain = r.read("behavior_gain");
    w.gains_.assign(n, std::vector<double>(w.cfg_.behavior_dim));
    for (std::size_t i = 0; i < n; ++i)
        std::copy(gain.begin() + i * w.cfg_.behavior_dim,
                  gain.begin() + (i + 1) * w.cfg_.behavior_dim, w.gains_[i].begin());
    w.baselines_ = r.read("baseline");
    w.build_fields();
    return w;
}

std::vector<double> make_stimulus(std::uint64_t seed, std::size_t index, std::size_t h,
                                  std::size_t w, double freq_lo, double freq_hi,
                                  std::size_t num_gratings) {
    std::vector<double> img(h * w, 0.0);
    for (std::size_t k = 0; k < num_gratings; ++k) {
        Rng rng = keyed_rng(seed, index, k);
        const double theta = rng.uniform(0.0, M_PI);
        const double freq = rng.uniform(freq_lo, freq_hi);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        const double amp = rng.uniform(0.5, 1.0);
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::size_t y = 0; y < h; ++y) {
            const double yn = -1.0 + 2.0 * static_cast<double>(y) / static_cast<double>(h - 1);
            for (std::size_t x = 0; x < w; ++x) {
                const double xn = -1.0 + 2.0 * static_cast<double>(x) / static_cast<double>(w - 1);
                img[y * w + x] += amp * std::cos(2.0 * M_PI * freq * (xn * c + yn * s) + phase);
            }
        }
    }
    double mean = std::accumulate(img.begin(), img.end(), 0.0) / static_cast<double>(img.size());
    double var = 0.0;
    for (double v : img) var += (v - mean) * (v - mean);
    var /= static_cast<double>(img.size());
    const double inv_std = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    for (auto& v : img) v = (v - mean) * inv_std;
    return img;
}

std::size_t DatasetBundle::trial_image(std::size_t trial) const {
    std::size_t acc = 0;
    for (std::size_t i = 0; i < repeats.size(); ++i) {
        acc += repeats[i];
        if (trial < acc) return i;
    }
    throw std::out_of_range("bundle: trial " + std::to_string(trial));
}

void DatasetBundle::validate() const {
    std::vector<bool> seen(num_images(), false);
    auto mark = [&](const std::vector<std::size_t>& ids, const char* which) {
        for (std::size_t id : ids) {
            if (id >= num_images())
                throw std::invalid_argument(std::string("bundle: ") + which + " split references image " +
                                            std::to_string(id));
            if (seen[id])
                throw std::invalid_argument("bundle: image " + std::to_string(id) +
                                            " appears in more than one split");
            seen[id] = true;
        }
    };
    mark(splits.train, "train");
    mark(splits.val, "val");
    mark(splits.test, "test");
    for (std::size_t id : splits.test)
        if (repeats[id] < 2)
            throw std::invalid_argument("bundle: test image " + std::to_string(id) +
                                        " has fewer than 2 repeats");
    for (std::size_t id : splits.train)
        if (repeats[id] != 1)
            throw std::invalid_argument("bundle: train image " + std::to_string(id) +
                                        " must have exactly 1 repeat");
    if (behavior.size() != num_trials() * behavior_dim)
        throw std::invalid_argument("bundle: behavior row count mismatch");
    if (stimuli.size() != num_images() * image_h * image_w)
        throw std::invalid_argument("bundle: stimulus size mismatch");
}

namespace {

void fill_behavior_and_responses(DatasetBundle& bundle, const World& world,
                                 std::uint64_t behavior_seed, std::uint64_t response_seed,
                                 double response_gain) {
    const auto& cfg = world.config();
    const std::size_t n_neurons = world.num_neurons();
    bundle.response_seed = response_seed;
    bundle.behavior.assign(bundle.num_trials() * bundle.behavior_dim, 0.0);
    for (std::size_t i = 0; i < bundle.num_images(); ++i)
        for (std::size_t j = 0; j < bundle.repeats[i]; ++j) {
            Rng rng = keyed_rng(tagged(behavior_seed, kTagBehavior), i, j);
            double* row =
                bundle.behavior.data() + bundle.responses.trial_index(i, j) * bundle.behavior_dim;
            for (std::size_t k = 0; k < bundle.behavior_dim; ++k) row[k] = rng.normal();
        }
    for (std::size_t i = 0; i < bundle.num_images(); ++i) {
        const double* img = bundle.image(i);
        for (std::size_t j = 0; j < bundle.repeats[i]; ++j) {
            const double* beh = bundle.trial_behavior(i, j);
            for (std::size_t n = 0; n < n_neurons; ++n) {
                const double rate = response_gain * world.rate(img, beh, n);
                if (cfg.poisson_sampling) {
                    Rng rng = keyed_rng(tagged(response_seed, kTagResponse), i, j, n);
                    bundle.responses.at(i, j, n) = static_cast<double>(rng.poisson(rate));
                } else {
                    bundle.responses.at(i, j, n) = rate;
                }
            }
        }
    }
}

SplitManifest make_splits(const SyntheticWorldConfig& cfg, std::uint64_t seed) {
    SplitManifest splits;
    std::vector<std::size_t> pool(cfg.num_train_images);
    std::iota(pool.begin(), pool.end(), 0);
    Rng rng(tagged(seed, kTagSplit));
    for (std::size_t i = pool.size() - 1; i > 0; --i)
        std::swap(pool[i], pool[rng.next_u64() % (i + 1)]);
    std::size_t n_val = static_cast<std::size_t>(
        std::lround(cfg.val_fraction * static_cast<double>(cfg.num_train_images)));
    n_val = std::max<std::size_t>(1, std::min(n_val, cfg.num_train_images - 1));
    splits.val.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
    splits.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
    std::sort(splits.val.begin(), splits.val.end());
    std::sort(splits.train.begin(), splits.train.end());
    splits.test.resize(cfg.num_test_images);
    std::iota(splits.test.begin(), splits.test.end(), cfg.num_train_images);
    return splits;
}

DatasetBundle make_bundle_frame(const SyntheticWorldConfig& cfg, std::size_t num_neurons) {
    DatasetBundle b;
    b.image_h = cfg.image_h;
    b.image_w = cfg.image_w;
    b.behavior_dim = cfg.behavior_dim;
    b.repeats.assign(cfg.num_train_images, 1);
    b.repeats.insert(b.repeats.end(), cfg.num_test_images, cfg.test_repeats);
    b.responses = TrialTensor(b.repeats, num_neurons);
    b.splits = make_splits(cfg, cfg.seed);
    return b;
}

}  // namespace

GeneratedData generate_world(const SyntheticWorldConfig& cfg) {
    cfg.validate();
    GeneratedData out;
    out.world = World(cfg, cfg.seed);
    out.bundle = make_bundle_frame(cfg, cfg.num_neurons);
    out.bundle.provenance = cfg.hash();

    const std::size_t total = cfg.num_train_images + cfg.num_test_images;
    out.bundle.stimuli.resize(total * cfg.image_h * cfg.image_w);
    for (std::size_t i = 0; i < total; ++i) {
        auto img = make_stimulus(tagged(cfg.seed, kTagStimulus), i, cfg.image_h, cfg.image_w,
                                 cfg.stim_freq_lo, cfg.stim_freq_hi, cfg.gratings_per_image);
        std::copy(img.begin(), img.end(),
                  out.bundle.stimuli.begin() +
                      static_cast<std::ptrdiff_t>(i * cfg.image_h * cfg.image_w));
    }
    fill_behavior_and_responses(out.bundle, out.world, cfg.seed, cfg.seed, 1.0);
    out.bundle.validate();
    return out;
}

const char* shift_name(ShiftKind k) {
    switch (k) {
        case ShiftKind::stimulus: return "stimulus";
        case ShiftKind::subject: return "subject";
        case ShiftKind::environment: return "environment";
    }
    return "?";
}

ShiftKind shift_from_name(const std::string& name) {
    if (name == "stimulus") return ShiftKind::stimulus;
    if (name == "subject") return ShiftKind::subject;
    if (name == "environment") return ShiftKind::environment;
    throw std::invalid_argument("unknown shift kind '" + name + "'");
}

ConditionShift ConditionShift::identity() {
    ConditionShift s;
    s.kind = ShiftKind::environment;
    s.contrast = 1.0;
    s.offset = 0.0;
    s.response_gain = 1.0;
    return s;
}

ShiftedData apply_shift(const DatasetBundle& source, const World& world,
                        const ConditionShift& shift) {
    const auto& cfg = world.config();
    ShiftedData out;
    out.bundle = source;

    switch (shift.kind) {
        case ShiftKind::environment: {
            out.world = world;
            for (auto& v : out.bundle.stimuli) v = shift.contrast * v + shift.offset;
            // same sampling keys as the source: a neutral transform reproduces
            // the source bundle bit-exactly
            fill_behavior_and_responses(out.bundle, out.world, source.response_seed,
                                        source.response_seed, shift.response_gain);
            break;
        }
        case ShiftKind::subject: {
            out.world = World(cfg, shift.seed);
            fill_behavior_and_responses(out.bundle, out.world, shift.seed, shift.seed, 1.0);
            break;
        }
        case ShiftKind::stimulus: {
            out.world = world;
            const std::size_t total = out.bundle.num_images();
            for (std::size_t i = 0; i < total; ++i) {
                auto img =
                    make_stimulus(tagged(shift.seed, kTagStimulus), i, cfg.image_h, cfg.image_w,
                                  shift.stim_freq_lo, shift.stim_freq_hi, cfg.gratings_per_image);
                std::copy(img.begin(), img.end(),
                          out.bundle.stimuli.begin() +
                              static_cast<std::ptrdiff_t>(i * cfg.image_h * cfg.image_w));
            }
            fill_behavior_and_responses(out.bundle, out.world, shift.seed, shift.seed, 1.0);
            break;
        }
    }
    out.bundle.provenance = out.world.config().hash();
    out.bundle.validate();
    return out;
}

void write_dataset(const DatasetBundle& bundle, const std::string& dir) {
    AvmdWriter w;
    w.add("stimuli", {bundle.num_images(), bundle.image_h, bundle.image_w}, bundle.stimuli);
    w.add("behavior", {bundle.num_trials(), bundle.behavior_dim}, bundle.behavior);
    w.add("responses", {bundle.num_trials(), bundle.num_neurons()}, bundle.responses.data());
    std::vector<double> reps(bundle.repeats.begin(), bundle.repeats.end());
    w.add("repeats", {bundle.num_images()}, reps);

    json meta;
    meta["kind"] = "dataset";
    meta["image_h"] = bundle.image_h;
    meta["image_w"] = bundle.image_w;
    meta["behavior_dim"] = bundle.behavior_dim;
    meta["num_neurons"] = bundle.num_neurons();
    meta["splits"] = {{"train", bundle.splits.train},
                      {"val", bundle.splits.val},
                      {"test", bundle.splits.test}};
    meta["provenance"] = std::to_string(bundle.provenance);
    meta["response_seed"] = std::to_string(bundle.response_seed);
    w.set_meta(meta.dump());
    w.write(dir);
}

DatasetBundle read_dataset(const std::string& dir) {
    AvmdReader r(dir);
    json meta = json::parse(r.meta_json());
    if (meta.value("kind", "") != "dataset")
        throw AvmdFormatError("dataset: " + dir + " is not a dataset container");
    DatasetBundle b;
    b.image_h = meta.at("image_h");
    b.image_w = meta.at("image_w");
    b.behavior_dim = meta.at("behavior_dim");
    const std::size_t num_neurons = meta.at("num_neurons");
    auto reps = r.read("repeats");
    b.repeats.assign(reps.begin(), reps.end());
    b.responses = TrialTensor(b.repeats, num_neurons);
    b.responses.data() = r.read("responses");
    b.stimuli = r.read("stimuli");
    b.behavior = r.read("behavior");
    b.splits.train = meta.at("splits").at("train").get<std::vector<std::size_t>>();
    b.splits.val = meta.at("splits").at("val").get<std::vector<std::size_t>>();
    b.splits.test = meta.at("splits").at("test").get<std::vector<std::size_t>>();
    b.provenance = std::stoull(meta.at("provenance").get<std::string>());
    b.response_seed = std::stoull(meta.at("response_seed").get<std::string>());
    b.validate();
    return b;
}

}  // namespace avm
