#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "avm/experiments.hpp"
#include "avm/runconfig.hpp"

using namespace avm;
namespace fs = std::filesystem;

namespace {

RunConfig load_config(const std::string& path) {
    return path.empty() ? RunConfig{} : RunConfig::from_file(path);
}

DatasetBundle load_data_dir(const std::string& dir) {
    return merge_bundles(read_dataset((fs::path(dir) / "train.avmd").string()),
                         read_dataset((fs::path(dir) / "val.avmd").string()),
                         read_dataset((fs::path(dir) / "test.avmd").string()));
}

void write_split_dir(const DatasetBundle& bundle, const std::string& dir) {
    SplitBundles split = split_bundle(bundle);
    write_dataset(split.train, (fs::path(dir) / "train.avmd").string());
    write_dataset(split.val, (fs::path(dir) / "val.avmd").string());
    write_dataset(split.test, (fs::path(dir) / "test.avmd").string());
}

ConditionShift standard_shift(ShiftKind kind, const SyntheticWorldConfig& world) {
    ConditionShift s;
    s.kind = kind;
    s.seed = mix64(world.seed ^ (0x53484954ULL + static_cast<std::uint64_t>(kind)));
    switch (kind) {
        case ShiftKind::stimulus:
            s.stim_freq_lo = 3.5;
            s.stim_freq_hi = 6.5;
            break;
        case ShiftKind::environment:
            s.contrast = 0.55;
            s.offset = 0.25;
            s.response_gain = 1.6;
            break;
        case ShiftKind::subject:
            break;
    }
    return s;
}

int cmd_synth(const std::string& config_path, const std::string& out,
              const std::vector<std::string>& shifts) {
    RunConfig cfg = load_config(config_path);
    fs::create_directories(out);
    cfg.echo_to(out);

    GeneratedData gen = generate_world(cfg.world);
    write_split_dir(gen.bundle, out);
    gen.world.save((fs::path(out) / "world.avmd").string());
    std::printf("synth: %zu neurons, %zu train / %zu val / %zu test images -> %s\n",
                gen.bundle.num_neurons(), gen.bundle.splits.train.size(),
                gen.bundle.splits.val.size(), gen.bundle.splits.test.size(), out.c_str());

    for (const auto& name : shifts) {
        const ShiftKind kind = shift_from_name(name);
        ShiftedData shifted = apply_shift(gen.bundle, gen.world, standard_shift(kind, cfg.world));
        const fs::path dir = fs::path(out) / ("shift-" + name);
        fs::create_directories(dir);
        write_split_dir(shifted.bundle, dir.string());
        shifted.world.save((dir / "world.avmd").string());
        std::printf("synth: wrote %s condition under %s\n", name.c_str(), dir.string().c_str());
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out) {
    RunConfig cfg = load_config(config_path);
    DatasetBundle data = load_data_dir(data_dir);
    fs::create_directories(out);
    cfg.echo_to(out);

    Model model(cfg.model_spec(data.num_neurons()));
    TrainResult result = train_phase1(model, data, cfg.train);
    result.checkpoint.save((fs::path(out) / "phase1.ckpt").string());
    write_train_log(result.log, (fs::path(out) / "train_log.csv").string());
    std::printf("train: %zu epochs, best val loss %.6f, %zu trainable parameters -> %s\n",
                result.checkpoint.epoch, result.checkpoint.best_val_loss,
                model.count_parameters(true), out.c_str());
    return 0;
}

int cmd_adapt(const std::string& config_path, const std::string& ckpt_path,
              const std::string& variant, const std::string& data_dir, const std::string& out) {
    RunConfig cfg = load_config(config_path);
    Checkpoint base = Checkpoint::load(ckpt_path);
    DatasetBundle data = load_data_dir(data_dir);
    fs::create_directories(out);
    cfg.echo_to(out);

    const AdaptStrategy strategy = strategy_from_name(variant);
    AdaptOutcome outcome = run_adaptation(base, strategy, data, cfg.train, cfg.camu);
    std::printf("adapt: strategy=%s trainable_params=%zu step0_val_loss=%.6f best_val_loss=%.6f\n",
                strategy_name(strategy), outcome.trainable_params, outcome.step0_val_loss,
                outcome.checkpoint.best_val_loss);

    outcome.checkpoint.save((fs::path(out) / "phase2.ckpt").string());
    write_train_log(outcome.log, (fs::path(out) / "train_log.csv").string());
    write_metric_csv(outcome.eval.report, (fs::path(out) / "metrics.csv").string());
    std::printf("adapt: rho_trial=%.4f rho_avg=%.4f feve=%.4f -> %s\n",
                outcome.eval.report.rho_trial.aggregate, outcome.eval.report.rho_avg.aggregate,
                outcome.eval.report.feve.aggregate, out.c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& out) {
    Checkpoint ck = Checkpoint::load(ckpt_path);
    DatasetBundle data = load_data_dir(data_dir);
    fs::create_directories(out);

    Model model = model_from_checkpoint(ck);
    EvalResult result = evaluate_model(model, data);
    write_metric_csv(result.report, (fs::path(out) / "metrics.csv").string());

    nlohmann::json summary;
    summary["val_loss"] = result.val_loss;
    summary["test_loss"] = result.test_loss;
    summary["checkpoint_best_val_loss"] = ck.best_val_loss;
    summary["rho_trial"] = result.report.rho_trial.aggregate;
    summary["rho_avg"] = result.report.rho_avg.aggregate;
    summary["feve"] = result.report.feve.aggregate;
    summary["included_neurons"] = result.report.feve.included;
    std::ofstream(fs::path(out) / "summary.json") << summary.dump(2) << '\n';

    std::printf("eval: rho_trial=%.4f rho_avg=%.4f feve=%.4f val_loss=%.6f -> %s\n",
                result.report.rho_trial.aggregate, result.report.rho_avg.aggregate,
                result.report.feve.aggregate, result.val_loss, out.c_str());
    return 0;
}

int cmd_params(const std::string& config_path, const std::string& ckpt_path,
               std::size_t neurons, const std::string& export_dir) {
    ModelSpec spec;
    std::optional<Checkpoint> ck;
    if (!ckpt_path.empty()) {
        ck = Checkpoint::load(ckpt_path);
        spec = ck->spec;
    } else {
        RunConfig cfg = load_config(config_path);
        spec = cfg.model_spec(neurons ? neurons : cfg.world.num_neurons);
    }

    const std::size_t d = spec.backbone.embed_dim;
    const std::size_t m = spec.camu.bottleneck;
    const std::size_t L = spec.backbone.num_blocks;
    const std::size_t backbone = backbone_param_count(spec.backbone);
    const std::size_t readout = Readout::param_count_formula(spec.readout);

    std::printf("model: variant=%s d=%zu blocks=%zu bottleneck=%zu neurons=%zu\n",
                variant_name(spec.variant), d, L, m, spec.readout.num_neurons);
    std::printf("%-28s %12zu\n", "backbone", backbone);
    std::printf("%-28s %12zu\n", "readout", readout);
    for (auto v : {VariantKind::avm_s, VariantKind::avm, VariantKind::avm_b}) {
        const std::size_t mod = Modulation::variant_param_count(v, d, m, L);
        std::printf("%-28s %12zu  (%.2f%% of backbone)\n",
                    (std::string("modulation[") + variant_name(v) + "]").c_str(), mod,
                    100.0 * static_cast<double>(mod) / static_cast<double>(backbone));
    }
    std::printf("ordering: avm-s (%zu) < avm (%zu) < avm-b (%zu)\n",
                Modulation::variant_param_count(VariantKind::avm_s, d, m, L),
                Modulation::variant_param_count(VariantKind::avm, d, m, L),
                Modulation::variant_param_count(VariantKind::avm_b, d, m, L));
    std::printf("reference points at study scale: 2.46M trainable core vs 0.11M (per-block) "
                "and 0.03M (shared) modulated cores\n");

    if (ck) {
        Model model = model_from_checkpoint(*ck);
        std::printf("checkpoint: total=%zu trainable=%zu\n", model.count_parameters(false),
                    model.count_parameters(true));
        if (!export_dir.empty()) {
            if (!model.modulation().enabled())
                throw ConfigError("params: checkpoint has no modulation units to export");
            auto files = model.modulation().export_weights(export_dir);
            std::printf("params: exported %zu CAMU weight files to %s\n", files.size(),
                        export_dir.c_str());
        }
    } else if (!export_dir.empty()) {
        throw ConfigError("params: --export-camu needs --checkpoint");
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& ckpt_path,
               const std::string& data_dir, const std::string& out,
               std::vector<double> weights, std::vector<std::size_t> dims,
               std::size_t workers) {
    RunConfig cfg = load_config(config_path);
    Checkpoint base = Checkpoint::load(ckpt_path);
    DatasetBundle data = load_data_dir(data_dir);
    fs::create_directories(out);
    cfg.echo_to(out);

    AblationGrid grid;
    if (!weights.empty()) grid.weights = std::move(weights);
    if (!dims.empty()) grid.dims = std::move(dims);

    auto cells = run_ablation(base, data, grid, cfg.train, workers);
    write_ablation_csv(cells, (fs::path(out) / "ablation.csv").string());
    write_ablation_svgs(cells, out);

    std::size_t failed = 0;
    for (const auto& c : cells)
        if (!c.ok) ++failed;
    std::printf("ablate: %zu cells (%zu failed) -> %s\n", cells.size(), failed, out.c_str());
    return failed == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"AVM: condition-aware neural response modeling on synthetic V1 data"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, variant, export_dir;
    std::vector<std::string> shifts;
    std::vector<double> weights;
    std::vector<std::size_t> dims;
    std::size_t neurons = 0, workers = 1;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset (plus shifted conditions)");
    synth->add_option("--config", config_path, "run configuration JSON");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--shift", shifts, "also emit shifted conditions: stimulus, subject, environment");

    auto* train = app.add_subcommand("train", "phase 1: joint backbone + readout training");
    train->add_option("--config", config_path, "run configuration JSON");
    train->add_option("--data", data_dir, "dataset directory (train/val/test.avmd)")->required();
    train->add_option("--out", out_dir, "output directory")->required();

    auto* adapt = app.add_subcommand("adapt", "phase 2: adaptation to a new condition");
    adapt->add_option("--config", config_path, "run configuration JSON");
    adapt->add_option("--checkpoint", ckpt_path, "phase-1 checkpoint")->required();
    adapt->add_option("--variant", variant, "avm, avm-s, avm-b, full-ft, frozen")->required();
    adapt->add_option("--data", data_dir, "dataset directory")->required();
    adapt->add_option("--out", out_dir, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint to score")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_dir, "output directory")->required();

    auto* params = app.add_subcommand("params", "parameter accounting per group and variant");
    params->add_option("--config", config_path, "run configuration JSON");
    params->add_option("--checkpoint", ckpt_path, "checkpoint to inspect");
    params->add_option("--neurons", neurons, "neuron count when building from config");
    params->add_option("--export-camu", export_dir, "write per-unit CAMU weight CSVs here");

    auto* ablate = app.add_subcommand("ablate", "modulation weight x bottleneck-dimension grid");
    ablate->add_option("--config", config_path, "run configuration JSON");
    ablate->add_option("--checkpoint", ckpt_path, "phase-1 checkpoint")->required();
    ablate->add_option("--data", data_dir, "dataset directory")->required();
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_option("--weights", weights, "modulation strengths (default 0.1 0.5 1.0 2.0)");
    ablate->add_option("--dims", dims, "bottleneck dimensions (default 1 5 31 50 100)");
    ablate->add_option("--workers", workers, "parallel adaptation workers");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return cmd_synth(config_path, out_dir, shifts);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir);
        if (adapt->parsed()) return cmd_adapt(config_path, ckpt_path, variant, data_dir, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, out_dir);
        if (params->parsed()) return cmd_params(config_path, ckpt_path, neurons, export_dir);
        if (ablate->parsed())
            return cmd_ablate(config_path, ckpt_path, data_dir, out_dir, weights, dims, workers);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const InvariantBreach& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 5;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
