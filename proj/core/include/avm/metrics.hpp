#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace avm {

// Responses or predictions indexed (image, repeat, neuron), with a per-image
// repeat count. Storage is trial-major: trials are (image, repeat) pairs in
// image order, each holding one row of neurons.
class TrialTensor {
public:
    enum class Kind { response, prediction };

    TrialTensor() = default;
    TrialTensor(std::vector<std::size_t> repeats_per_image, std::size_t num_neurons,
                Kind kind = Kind::response);

    std::size_t num_images() const { return repeats_.size(); }
    std::size_t num_neurons() const { return num_neurons_; }
    std::size_t num_trials() const { return trial_offsets_.empty() ? 0 : total_trials_; }
    std::size_t repeats(std::size_t image) const { return repeats_.at(image); }
    const std::vector<std::size_t>& repeats_per_image() const { return repeats_; }
    Kind kind() const { return kind_; }

    std::size_t trial_index(std::size_t image, std::size_t repeat) const;
    double at(std::size_t image, std::size_t repeat, std::size_t neuron) const;
    double& at(std::size_t image, std::size_t repeat, std::size_t neuron);

    std::vector<double>& data() { return values_; }
    const std::vector<double>& data() const { return values_; }

    // throws std::invalid_argument unless both tensors share (images, repeats, neurons)
    void check_same_structure(const TrialTensor& other) const;

private:
    std::vector<std::size_t> repeats_;
    std::vector<std::size_t> trial_offsets_;
    std::size_t total_trials_ = 0;
    std::size_t num_neurons_ = 0;
    std::vector<double> values_;
    Kind kind_ = Kind::response;
};

struct PerNeuronResult {
    std::vector<double> value;           // NaN where not computable
    std::vector<bool> valid;
    std::vector<std::string> reason;     // empty where valid
    double aggregate = 0.0;              // mean over valid neurons
    std::size_t included = 0;
};

// Pearson correlation over all (image, repeat) pairs, per neuron.
PerNeuronResult single_trial_corr(const TrialTensor& r, const TrialTensor& o);

// Correlation between per-image mean responses and per-image mean predictions.
PerNeuronResult avg_corr(const TrialTensor& r, const TrialTensor& o);

// Mean over images of the unbiased across-repeat variance; requires >= 2
// repeats everywhere and throws naming the offending image otherwise.
std::vector<double> noise_variance(const TrialTensor& r);

// Fraction of explainable variance explained:
//   1 - [(1/N) sum (r_ij - o_i)^2 - s2] / [Var(r) - s2]
// where o_i is the per-image mean prediction, Var(r) the population variance
// over all N trials, and s2 the pooled within-image scatter (1/N) sum
// (r_ij - rbar_i)^2. Pooling s2 the same way as the numerator's mean-squared
// error makes the per-image-mean predictor score exactly 1; the unbiased
// estimator exported by noise_variance would not. Never clamped, so values
// below 0 pass through.
PerNeuronResult feve(const TrialTensor& r, const TrialTensor& o);

struct MetricReport {
    PerNeuronResult rho_trial;
    PerNeuronResult rho_avg;
    PerNeuronResult feve;
    std::size_t num_neurons = 0;
};

MetricReport compute_metrics(const TrialTensor& r, const TrialTensor& o);

// CSV rows `neuron,rho_trial,rho_avg,feve,included,reason` plus one
// `aggregate` row; `included` marks neurons counted by all three aggregates.
void write_metric_csv(const MetricReport& report, const std::string& path);

}  // namespace avm
