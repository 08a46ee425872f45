#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "jps/data.hpp"
#include "jps/diagnostics.hpp"
#include "jps/model.hpp"
#include "jps/selection.hpp"
#include "jps/trainer.hpp"

namespace jps {

/// Embedded in every output file next to the config hash.
const char* artifact_version();

struct DiagnosticsConfig {
    double beta = 1.0;  // stability constant; bound terms are relative diagnostics only
    bool proxy_enabled = true;
};

/// One JSON document drives every subcommand. Defaults are the desk-scale
/// experiment; the seeds list drives the whole protocol.
struct ExperimentConfig {
    ModelConfig model;
    BenchmarkSpec data;
    TrainConfig train;
    PretrainConfig pretrain;
    DiagnosticsConfig diagnostics;
    std::string output_dir = "out";
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    int workers = 1;
    bool emit_wall_time = false;  // off keeps reruns byte-identical

    void validate() const;  // cross-field consistency on top of per-section checks
    /// FNV-1a over the canonical dump of the semantic fields (model, data,
    /// train, pretrain, diagnostics, seeds). output_dir / workers /
    /// emit_wall_time are excluded: they cannot change results.
    std::uint64_t config_hash() const;
};

/// Canonical serialization: sorted keys, shortest round-trip doubles.
/// parse_config(dump_config(c)) reproduces c exactly; unknown keys are
/// rejected so typos cannot silently fall back to defaults.
std::string dump_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& json_text);  // ValidationError on bad JSON
ExperimentConfig load_config(const std::string& path);        // IoError if unreadable

/// JPS_CACHE_DIR env var if set, else output_dir/cache.
std::string cache_dir_for(const ExperimentConfig& cfg);

/// Theta0Provider that pretrains once per (model, pretrain, effective spec,
/// init seed) key and reuses the checkpoint afterwards. Unreadable or
/// mismatched cache entries are recomputed and overwritten; either path
/// yields bit-identical parameters.
Theta0Provider caching_provider(const ExperimentConfig& cfg);

/// The paper's rho search list.
const std::vector<double>& default_rho_grid();

/// One sweep cell = (seed, target, selector, rho). Cells sharing (seed,
/// target) reuse the dataset, theta0, split and gradient snapshot, and are
/// bit-identical to what lodo_run would produce for the same cell.
struct SweepCell {
    RunEntry entry;
    MaskStats stats;  // zeroed for HeadOnly cells (no per-domain k to reduce)
};

/// Full cross of cfg.seeds x targets x selectors x rhos, in that nesting
/// order. Cells within a (seed, target) group may run on cfg.workers
/// threads; results do not depend on scheduling.
std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg,
                                 const std::vector<SelectorKind>& selectors,
                                 const std::vector<double>& rhos,
                                 const Theta0Provider& provider);

struct GradcheckOutcome {
    FiniteDiffReport report;
    std::string report_path;
};

/// Central-difference check of the configured model at init, over every
/// coordinate. Writes gradcheck.json first, then throws NumericError if the
/// check failed, so the report survives a failing exit.
GradcheckOutcome cmd_gradcheck(const ExperimentConfig& cfg);

struct SelectOverrides {
    std::optional<SelectorKind> selector;
    std::optional<double> rho;
    std::optional<int> L;
    std::optional<int> target;          // default: last domain
    std::optional<std::string> out_path;  // default: output_dir/mask.json
};

/// Builds the mask for cfg.seeds.front() at the chosen target, exactly as
/// the corresponding lodo_run cell would, and saves it. Returns the path.
std::string cmd_select(const ExperimentConfig& cfg, const SelectOverrides& ov = {});

struct TrainOutcome {
    RunReport report;
    std::string json_path;
    std::string csv_path;
};

/// mask_path empty: the full LODO protocol over cfg.seeds. Otherwise the
/// single cell the saved mask pins down (its seed/target/selector override
/// the config); ProvenanceError if the mask does not match the world the
/// config reconstructs. Writes report.json + report.csv.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& mask_path = "");

/// rho x selector sweep over all seeds and targets. Rows sorted by
/// (selector name, rho, seed, target); '#'-prefixed aggregate lines with
/// mean +/- std per (selector, rho) are appended. Returns the CSV path.
std::string cmd_ablate(const ExperimentConfig& cfg,
                       std::vector<SelectorKind> selectors = {},
                       std::vector<double> rho_grid = {});

/// Bound terms, mask structure and feature-shift proxies for one mask
/// (a saved file, or the mask cmd_select would build by default). Writes
/// diagnostics.json and returns its path. ValidationError on an empty mask.
std::string cmd_diagnose(const ExperimentConfig& cfg, const std::string& mask_path = "");

}  // namespace jps
