#include "avm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace avm {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kVarFloor = 1e-300;
}  // namespace

TrialTensor::TrialTensor(std::vector<std::size_t> repeats_per_image, std::size_t num_neurons,
                         Kind kind)
    : repeats_(std::move(repeats_per_image)), num_neurons_(num_neurons), kind_(kind) {
    trial_offsets_.reserve(repeats_.size());
    for (std::size_t r : repeats_) {
        if (r == 0) throw std::invalid_argument("TrialTensor: image with zero repeats");
        trial_offsets_.push_back(total_trials_);
        total_trials_ += r;
    }
    values_.assign(total_trials_ * num_neurons_, 0.0);
}

std::size_t TrialTensor::trial_index(std::size_t image, std::size_t repeat) const {
    if (image >= repeats_.size() || repeat >= repeats_[image])
        throw std::out_of_range("TrialTensor: trial (" + std::to_string(image) + ", " +
                                std::to_string(repeat) + ")");
    return trial_offsets_[image] + repeat;
}

double TrialTensor::at(std::size_t image, std::size_t repeat, std::size_t neuron) const {
    return values_[trial_index(image, repeat) * num_neurons_ + neuron];
}

double& TrialTensor::at(std::size_t image, std::size_t repeat, std::size_t neuron) {
    return values_[trial_index(image, repeat) * num_neurons_ + neuron];
}

void TrialTensor::check_same_structure(const TrialTensor& other) const {
    if (repeats_ != other.repeats_ || num_neurons_ != other.num_neurons_)
        throw std::invalid_argument(
            "TrialTensor: structure mismatch (images " + std::to_string(num_images()) + " vs " +
            std::to_string(other.num_images()) + ", neurons " + std::to_string(num_neurons_) +
            " vs " + std::to_string(other.num_neurons_) + ")");
}

namespace {

// plain Pearson over paired samples
struct Moments {
    double mean_a = 0, mean_b = 0, var_a = 0, var_b = 0, cov = 0;
};

Moments pair_moments(const std::vector<double>& a, const std::vector<double>& b) {
    Moments m;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        m.mean_a += a[i];
        m.mean_b += b[i];
    }
    m.mean_a /= static_cast<double>(n);
    m.mean_b /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - m.mean_a, db = b[i] - m.mean_b;
        m.var_a += da * da;
        m.var_b += db * db;
        m.cov += da * db;
    }
    return m;
}

void finalize(PerNeuronResult& res) {
    double sum = 0.0;
    res.included = 0;
    for (std::size_t n = 0; n < res.value.size(); ++n) {
        if (res.valid[n]) {
            sum += res.value[n];
            ++res.included;
        }
    }
    res.aggregate = res.included ? sum / static_cast<double>(res.included) : kNaN;
}

PerNeuronResult corr_impl(const TrialTensor& r, const TrialTensor& o, bool average_repeats) {
    r.check_same_structure(o);
    const std::size_t neurons = r.num_neurons();
    PerNeuronResult res;
    res.value.assign(neurons, kNaN);
    res.valid.assign(neurons, false);
    res.reason.assign(neurons, "");

    for (std::size_t n = 0; n < neurons; ++n) {
        std::vector<double> a, b;
        if (average_repeats) {
            for (std::size_t i = 0; i < r.num_images(); ++i) {
                double ra = 0, oa = 0;
                for (std::size_t j = 0; j < r.repeats(i); ++j) {
                    ra += r.at(i, j, n);
                    oa += o.at(i, j, n);
                }
                a.push_back(ra / static_cast<double>(r.repeats(i)));
                b.push_back(oa / static_cast<double>(r.repeats(i)));
            }
        } else {
            for (std::size_t i = 0; i < r.num_images(); ++i)
                for (std::size_t j = 0; j < r.repeats(i); ++j) {
                    a.push_back(r.at(i, j, n));
                    b.push_back(o.at(i, j, n));
                }
        }
        const Moments m = pair_moments(a, b);
        if (m.var_a <= kVarFloor) {
            res.reason[n] = "zero response variance";
        } else if (m.var_b <= kVarFloor) {
            res.reason[n] = "zero prediction variance";
        } else {
            res.value[n] = m.cov / std::sqrt(m.var_a * m.var_b);
            res.valid[n] = true;
        }
    }
    finalize(res);
    return res;
}

}  // namespace

PerNeuronResult single_trial_corr(const TrialTensor& r, const TrialTensor& o) {
    return corr_impl(r, o, false);
}

PerNeuronResult avg_corr(const TrialTensor& r, const TrialTensor& o) {
    return corr_impl(r, o, true);
}

std::vector<double> noise_variance(const TrialTensor& r) {
    for (std::size_t i = 0; i < r.num_images(); ++i)
        if (r.repeats(i) < 2)
            throw std::invalid_argument("noise_variance: image " + std::to_string(i) +
                                        " has fewer than 2 repeats");
    std::vector<double> out(r.num_neurons(), 0.0);
    for (std::size_t n = 0; n < r.num_neurons(); ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < r.num_images(); ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < r.repeats(i); ++j) mean += r.at(i, j, n);
            mean /= static_cast<double>(r.repeats(i));
            double ss = 0.0;
            for (std::size_t j = 0; j < r.repeats(i); ++j) {
                const double d = r.at(i, j, n) - mean;
                ss += d * d;
            }
            acc += ss / static_cast<double>(r.repeats(i) - 1);
        }
        out[n] = acc / static_cast<double>(r.num_images());
    }
    return out;
}

PerNeuronResult feve(const TrialTensor& r, const TrialTensor& o) {
    r.check_same_structure(o);
    for (std::size_t i = 0; i < r.num_images(); ++i)
        if (r.repeats(i) < 2)
            throw std::invalid_argument("feve: image " + std::to_string(i) +
                                        " has fewer than 2 repeats");
    const std::size_t neurons = r.num_neurons();
    const double total = static_cast<double>(r.num_trials());
    PerNeuronResult res;
    res.value.assign(neurons, kNaN);
    res.valid.assign(neurons, false);
    res.reason.assign(neurons, "");

    for (std::size_t n = 0; n < neurons; ++n) {
        double grand = 0.0;
        for (std::size_t i = 0; i < r.num_images(); ++i)
            for (std::size_t j = 0; j < r.repeats(i); ++j) grand += r.at(i, j, n);
        grand /= total;

        double mse = 0.0, pooled_noise = 0.0, var = 0.0;
        for (std::size_t i = 0; i < r.num_images(); ++i) {
            double rbar = 0.0, obar = 0.0;
            for (std::size_t j = 0; j < r.repeats(i); ++j) {
                rbar += r.at(i, j, n);
                obar += o.at(i, j, n);
            }
            rbar /= static_cast<double>(r.repeats(i));
            obar /= static_cast<double>(r.repeats(i));
            for (std::size_t j = 0; j < r.repeats(i); ++j) {
                const double rv = r.at(i, j, n);
                mse += (rv - obar) * (rv - obar);
                pooled_noise += (rv - rbar) * (rv - rbar);
                var += (rv - grand) * (rv - grand);
            }
        }
        mse /= total;
        pooled_noise /= total;
        var /= total;

        const double denom = var - pooled_noise;
        if (denom <= kVarFloor) {
            res.reason[n] = "noise variance exceeds total variance";
            continue;
        }
        res.value[n] = 1.0 - (mse - pooled_noise) / denom;
        res.valid[n] = true;
    }
    finalize(res);
    return res;
}

MetricReport compute_metrics(const TrialTensor& r, const TrialTensor& o) {
    MetricReport rep;
    rep.num_neurons = r.num_neurons();
    rep.rho_trial = single_trial_corr(r, o);
    rep.rho_avg = avg_corr(r, o);
    rep.feve = feve(r, o);
    return rep;
}

void write_metric_csv(const MetricReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_metric_csv: cannot write " + path);
    f << "neuron,rho_trial,rho_avg,feve,included,reason\n";
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (std::size_t n = 0; n < report.num_neurons; ++n) {
        const bool included =
            report.rho_trial.valid[n] && report.rho_avg.valid[n] && report.feve.valid[n];
        std::string reason;
        for (const auto* r : {&report.rho_trial.reason[n], &report.rho_avg.reason[n],
                              &report.feve.reason[n]}) {
            if (r->empty()) continue;
            if (!reason.empty()) reason += "; ";
            reason += *r;
        }
        f << n << ',' << fmt(report.rho_trial.value[n]) << ',' << fmt(report.rho_avg.value[n])
          << ',' << fmt(report.feve.value[n]) << ',' << (included ? 1 : 0) << ',' << reason
          << '\n';
    }
    f << "aggregate," << fmt(report.rho_trial.aggregate) << ',' << fmt(report.rho_avg.aggregate)
      << ',' << fmt(report.feve.aggregate) << ",," << '\n';
}

}  // namespace avm
