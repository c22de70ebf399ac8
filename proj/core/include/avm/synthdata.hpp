#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avm/metrics.hpp"

namespace avm {

struct GaborParams {
    double center_x = 0, center_y = 0;  // normalized [-1,1]
    double orientation = 0;             // radians
    double frequency = 2;               // cycles per normalized unit
    double sigma = 0.3;                 // envelope width
    double amplitude = 1;
    double phase = 0;
};

struct SyntheticWorldConfig {
    std::size_t num_neurons = 200;
    std::size_t image_h = 36;
    std::size_t image_w = 64;
    std::size_t behavior_dim = 5;

    std::size_t num_train_images = 2000;  // validation is carved from these
    std::size_t num_test_images = 50;
    std::size_t test_repeats = 10;
    double val_fraction = 0.1;

    // stimulus statistics family: oriented gratings in a frequency band
    double stim_freq_lo = 1.0;
    double stim_freq_hi = 3.0;
    std::size_t gratings_per_image = 8;

    double gabor_gain = 0.7;       // scale of the stimulus drive
    double behavior_gain = 0.25;   // scale of per-neuron behavioral gains
    double baseline_lo = -0.2;
    double baseline_hi = 0.9;
    bool poisson_sampling = true;
    std::uint64_t seed = 0;

    void validate() const;
    std::uint64_t hash() const;
    std::string to_json() const;
    static SyntheticWorldConfig from_json(const std::string& text);
};

// Ground truth: per-neuron Gabor receptive fields (cached as pixel filters,
// unit L2 norm), behavioral gain vectors, and baselines.
// rate = softplus(gabor_gain * <RF, image> + g . behavior + baseline)
class World {
public:
    World() = default;
    World(SyntheticWorldConfig cfg, std::uint64_t rf_seed);

    const SyntheticWorldConfig& config() const { return cfg_; }
    std::size_t num_neurons() const { return cfg_.num_neurons; }
    const GaborParams& rf(std::size_t neuron) const { return rfs_[neuron]; }
    const std::vector<double>& rf_field(std::size_t neuron) const { return fields_[neuron]; }
    const std::vector<double>& behavior_gain(std::size_t neuron) const { return gains_[neuron]; }
    double baseline(std::size_t neuron) const { return baselines_[neuron]; }

    double rate(const double* image, const double* behavior, std::size_t neuron) const;

    void save(const std::string& dir) const;
    static World load(const std::string& dir);

private:
    void build_fields();
    SyntheticWorldConfig cfg_;
    std::vector<GaborParams> rfs_;
    std::vector<std::vector<double>> fields_;  // [n][H*W], unit norm
    std::vector<std::vector<double>> gains_;   // [n][B]
    std::vector<double> baselines_;
};

struct SplitManifest {
    std::vector<std::size_t> train, val, test;  // indices into the bundle's images
};

// Stimuli + per-trial behavior + responses + split manifest. Trials follow
// the TrialTensor layout: image-major, repeats within.
struct DatasetBundle {
    std::size_t image_h = 0, image_w = 0, behavior_dim = 0;
    std::vector<double> stimuli;          // [num_images * H * W]
    std::vector<std::size_t> repeats;     // per image
    std::vector<double> behavior;         // [num_trials * behavior_dim]
    TrialTensor responses;
    SplitManifest splits;
    std::uint64_t provenance = 0;         // world config hash
    std::uint64_t response_seed = 0;

    std::size_t num_images() const { return repeats.size(); }
    std::size_t num_trials() const { return responses.num_trials(); }
    std::size_t num_neurons() const { return responses.num_neurons(); }
    const double* image(std::size_t i) const { return stimuli.data() + i * image_h * image_w; }
    const double* trial_behavior(std::size_t image, std::size_t repeat) const {
        return behavior.data() + responses.trial_index(image, repeat) * behavior_dim;
    }
    std::size_t trial_image(std::size_t trial) const;

    void validate() const;  // split disjointness, repeat structure
};

struct GeneratedData {
    World world;
    DatasetBundle bundle;
};

GeneratedData generate_world(const SyntheticWorldConfig& cfg);

enum class ShiftKind { stimulus, subject, environment };
const char* shift_name(ShiftKind k);
ShiftKind shift_from_name(const std::string& name);

struct ConditionShift {
    ShiftKind kind = ShiftKind::environment;
    std::uint64_t seed = 0;
    // stimulus shift: regenerate images from a different frequency band
    double stim_freq_lo = 3.0;
    double stim_freq_hi = 6.0;
    // environment shift: pixel transform and global rate gain
    double contrast = 1.0;
    double offset = 0.0;
    double response_gain = 1.0;

    static ConditionShift identity();
};

struct ShiftedData {
    World world;  // resampled for subject shifts, otherwise a copy
    DatasetBundle bundle;
};

ShiftedData apply_shift(const DatasetBundle& source, const World& world,
                        const ConditionShift& shift);

void write_dataset(const DatasetBundle& bundle, const std::string& dir);
DatasetBundle read_dataset(const std::string& dir);

// standardized band-limited grating mixture for image `index`
std::vector<double> make_stimulus(std::uint64_t seed, std::size_t index, std::size_t h,
                                  std::size_t w, double freq_lo, double freq_hi,
                                  std::size_t num_gratings);

}  // namespace avm
