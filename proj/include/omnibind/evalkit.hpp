#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omnibind/dataset.hpp"
#include "omnibind/fusion.hpp"

namespace omnibind {

struct SampleOutcome {
  std::uint32_t sample_id = 0;
  std::string combination;
  std::size_t size = 0;
  std::size_t truth = 0;
  std::size_t predicted = 0;

  bool correct() const { return truth == predicted; }
};

struct CombinationAccuracy {
  std::string combination;
  std::size_t size = 0;
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // %
};

// Per-combination accuracy plus 2M..5M groups and Total, all sample-weighted.
struct AccuracyTable {
  std::vector<CombinationAccuracy> rows;  // sorted by (size, combination)
  std::map<std::size_t, double> by_size;
  double total = 0.0;
  std::size_t samples = 0;
  std::vector<std::string> warnings;

  const CombinationAccuracy* find(const std::string& combination) const;
  double group(std::size_t size) const;
};

// `expected` lists combinations that should appear; those without samples
// are omitted with a warning.
AccuracyTable summarize(std::span<const SampleOutcome> outcomes,
                        std::span<const std::string> expected = {});

// Number of worker threads from OMNIBIND_THREADS (unset, 0 or invalid: 1).
std::size_t eval_threads();

// Frozen state shared by every evaluation.
struct EvalContext {
  const SemanticWorld* world = nullptr;
  const Encoders* encoders = nullptr;
  const RecordStore* store = nullptr;
  const EmbeddingCache* cache = nullptr;
  Tensor labels;
};

using Predictor = std::function<std::size_t(const std::map<ModalityId, Tensor>& embeddings)>;

Predictor fusion_predictor(const FusionModel& model, const Tensor& labels);

// Runs the predictor over every sample (optionally noised), in parallel over
// `threads` workers. Output order follows the manifest regardless of threads.
std::vector<SampleOutcome> evaluate(const DatasetManifest& manifest, const EvalContext& ctx,
                                    const Predictor& predict, const NoiseSpec* noise = nullptr,
                                    std::size_t threads = 1);

// Zero-shot accuracy of each modality's records against the label embeddings.
std::map<ModalityId, double> per_modality_accuracy(const EvalContext& ctx, const LabelAlignment& alignment);

struct NamedModel {
  std::string name;
  const FusionModel* model = nullptr;
};

struct BaselineRow {
  std::string strategy;
  AccuracyTable table;
};

std::vector<BaselineRow> eval_fusion_baselines(const DatasetManifest& manifest, const EvalContext& ctx,
                                               std::span<const NamedModel> models,
                                               const NoiseSpec* noise = nullptr, std::size_t threads = 1);

struct RobustnessCell {
  std::string combination;
  std::size_t size = 0;
  ModalityId target = ModalityId::Image;
  bool applicable = false;
  std::size_t samples = 0;
  double clean = 0.0;
  double noisy = 0.0;
  double delta = 0.0;  // noisy - clean; 0 when not applicable
};

// For every combination in the manifest and every noise target modality.
std::vector<RobustnessCell> eval_robustness(const DatasetManifest& manifest, const EvalContext& ctx,
                                            const Predictor& predict, double magnitude, std::uint64_t seed,
                                            std::size_t threads = 1);

struct MetricsReport {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::map<ModalityId, double> per_modality;
  std::map<std::string, AccuracyTable> combination_accuracy;  // by model name
  std::vector<BaselineRow> fusion_baselines;
  std::vector<BaselineRow> noisy_baselines;  // random-one noise
  std::vector<RobustnessCell> robustness;
  // Teacher dominance check: combinations containing text where text noise
  // hurts less than some student noise.
  std::vector<std::string> dominance_violations;
};

std::vector<std::string> text_dominance_violations(std::span<const RobustnessCell> cells);

// CSV writers; every writer emits a header line and fixed 4-decimal numbers.
std::string predictions_csv(std::span<const SampleOutcome> outcomes);
std::string accuracy_csv(const AccuracyTable& table);
std::string baselines_csv(std::span<const BaselineRow> rows);
std::string robustness_csv(std::span<const RobustnessCell> cells);
std::string per_modality_csv(const std::map<ModalityId, double>& acc);
std::string summary_json(const MetricsReport& report);

enum class TableKind { TwoModal, MultiModal, Fusion, Robustness };
TableKind parse_table_kind(const std::string& s);
// Human-readable layout of one table kind.
std::string render_table(const MetricsReport& report, TableKind kind);

}  // namespace omnibind
