#pragma once

#include <string>
#include <vector>

#include "avm/metrics.hpp"
#include "avm/training.hpp"

namespace avm {

// eval-mode predictions for the listed images, aligned with the responses
TrialTensor predict_split(const Model& model, const DatasetBundle& data,
                          const std::vector<std::size_t>& image_ids);
TrialTensor responses_for_split(const DatasetBundle& data,
                                const std::vector<std::size_t>& image_ids);

struct EvalResult {
    MetricReport report;       // on the test split
    double val_loss = 0.0;     // mean per-element Poisson loss, NaN when absent
    double test_loss = 0.0;
};

EvalResult evaluate_model(const Model& model, const DatasetBundle& data, double loss_eps = 1e-8);

// one bundle per split; merge_bundles reverses split_bundle
struct SplitBundles {
    DatasetBundle train, val, test;
};
SplitBundles split_bundle(const DatasetBundle& bundle);
DatasetBundle merge_bundles(const DatasetBundle& train, const DatasetBundle& val,
                            const DatasetBundle& test);

enum class AdaptStrategy { avm, avm_s, avm_b, full_ft, frozen };
const char* strategy_name(AdaptStrategy s);
AdaptStrategy strategy_from_name(const std::string& name);

struct AdaptOutcome {
    Checkpoint checkpoint;
    std::vector<LogRow> log;
    std::size_t trainable_params = 0;  // parameters the strategy actually updates
    double step0_val_loss = 0.0;
    EvalResult eval;
};

// Phase-2 style adaptation of a phase-1 checkpoint to a new condition.
// Adapter strategies wire the requested variant around the frozen backbone;
// full-ft retrains everything; frozen takes zero optimizer steps.
AdaptOutcome run_adaptation(const Checkpoint& base, AdaptStrategy strategy,
                            const DatasetBundle& new_data, TrainConfig train_cfg,
                            CamuConfig camu_cfg);

struct AblationCell {
    double weight = 0.0;
    std::size_t dim = 0;
    bool ok = false;
    std::string error;
    double rho_trial = 0.0, rho_avg = 0.0, feve = 0.0;
    std::size_t trainable_params = 0;
    double seconds = 0.0;
};

struct AblationGrid {
    std::vector<double> weights{0.1, 0.5, 1.0, 2.0};
    std::vector<std::size_t> dims{1, 5, 31, 50, 100};
};

// Phase-2 adaptation per (weight, dim) cell; failed cells are kept with the
// error recorded. Cells are independent and may run on worker threads.
std::vector<AblationCell> run_ablation(const Checkpoint& base, const DatasetBundle& data,
                                       const AblationGrid& grid, const TrainConfig& cfg,
                                       std::size_t workers = 1);

void write_ablation_csv(const std::vector<AblationCell>& cells, const std::string& path);
// one polyline SVG per metric: x = bottleneck dim, one series per weight
void write_ablation_svgs(const std::vector<AblationCell>& cells, const std::string& dir);

}  // namespace avm
