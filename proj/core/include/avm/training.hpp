#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avm/model.hpp"
#include "avm/synthdata.hpp"

namespace avm {

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvariantBreach : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::size_t batch_size = 16;
    double lr = 0.0016;
    std::size_t max_epochs = 400;
    std::size_t plateau_patience = 10;
    double lr_decay_factor = 0.3;
    double weight_decay = 1e-4;
    std::size_t max_decays_before_stop = 3;
    double loss_eps = 1e-8;
    double plateau_improvement = 1e-6;  // absolute improvement that resets the plateau
    std::uint64_t seed = 0;

    void validate() const;
};

// sum over trials and neurons of o - r*log(o + eps); predictions must be
// positive (the readout guarantees it)
Tensor poisson_loss(const Tensor& responses, const Tensor& predictions, double eps = 1e-8);

// plain-double flavor used for validation scoring (no tape involvement)
double poisson_loss_value(std::span<const double> responses, std::span<const double> predictions,
                          double eps = 1e-8);

class AdamW {
public:
    AdamW(std::vector<NamedParam> params, double lr, double weight_decay);

    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::uint64_t step_count() const { return step_count_; }
    const std::vector<NamedParam>& params() const { return params_; }

    // serialization hooks for checkpoints
    std::map<std::string, std::vector<double>> first_moments() const;
    std::map<std::string, std::vector<double>> second_moments() const;
    void restore(const std::map<std::string, std::vector<double>>& m,
                 const std::map<std::string, std::vector<double>>& v, std::uint64_t step_count);

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_;
    double weight_decay_;
    std::uint64_t step_count_ = 0;
};

enum class SchedulerAction { keep, decay, stop };

struct SchedulerDecision {
    SchedulerAction action = SchedulerAction::keep;
    double lr = 0.0;          // learning rate after the decision
    std::size_t decays = 0;   // total decays so far (including this one)
};

// Pure function of the validation-loss history: decays by lr_decay_factor
// when the best loss has not improved by more than plateau_improvement for
// plateau_patience consecutive epochs, and stops after
// max_decays_before_stop decays each followed by a full stale window.
SchedulerDecision lr_schedule_step(const std::vector<double>& val_history,
                                   const TrainConfig& cfg);

struct LogRow {
    std::size_t epoch = 0;
    std::string split;  // "train" or "val"
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

void write_train_log(const std::vector<LogRow>& log, const std::string& path);

struct Checkpoint {
    ModelSpec spec;
    std::map<std::string, std::vector<double>> params;       // state at `epoch`
    std::map<std::string, std::vector<double>> best_params;  // best-validation snapshot
    std::map<std::string, std::vector<double>> opt_m, opt_v;
    std::uint64_t opt_step = 0;
    std::size_t epoch = 0;
    double best_val_loss = 0.0;
    std::vector<double> val_history;
    Rng::State rng_state;
    std::string phase;  // "phase1" or "phase2"
    bool finalized = false;

    void save(const std::string& dir) const;
    static Checkpoint load(const std::string& dir);
};

// Epoch-driven training loop shared by both phases. Batch order, position
// jitter, and all arithmetic are functions of (config seed, epoch), so a
// checkpoint round-trip resumes bit-exactly.
class Trainer {
public:
    Trainer(Model& model, const DatasetBundle& data, TrainConfig cfg, FreezePlan plan);

    // evaluate the mean per-element Poisson loss over a split, eval mode
    double split_loss(const std::vector<std::size_t>& image_ids) const;

    struct EpochOutcome {
        double train_loss = 0.0;
        double val_loss = 0.0;
        SchedulerAction action = SchedulerAction::keep;
    };
    EpochOutcome run_epoch();

    struct RunResult {
        Checkpoint checkpoint;  // finalized: params hold the best snapshot
        std::vector<LogRow> log;
    };
    RunResult run();

    Checkpoint snapshot() const;  // resumable state at the current epoch
    void restore(const Checkpoint& ck);

    std::size_t epoch() const { return epoch_; }
    double best_val_loss() const { return best_val_loss_; }
    const std::vector<double>& val_history() const { return val_history_; }

private:
    Tensor batch_loss(const std::vector<std::pair<std::size_t, std::size_t>>& trials);

    Model& model_;
    const DatasetBundle& data_;
    TrainConfig cfg_;
    FreezePlan plan_;
    AdamW optimizer_;
    Rng jitter_rng_;
    std::size_t epoch_ = 0;
    double best_val_loss_;
    std::map<std::string, std::vector<double>> best_params_;
    std::vector<double> val_history_;
    std::vector<LogRow> log_;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LogRow> log;
};

// Phase 1: joint backbone + readout training on the bundle's train/val splits.
TrainResult train_phase1(Model& model, const DatasetBundle& data, const TrainConfig& cfg);

// Phase 2: modulation (and readout, per the model spec flag) training with a
// frozen backbone; zero-initializes the modulation path first and verifies
// the backbone hash afterwards, throwing InvariantBreach on drift.
TrainResult train_phase2(Model& model, const DatasetBundle& data, const TrainConfig& cfg);

// build a model from a checkpoint's best-validation parameters
Model model_from_checkpoint(const Checkpoint& ck);

}  // namespace avm
