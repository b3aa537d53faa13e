#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omnibind/world.hpp"

namespace omnibind {

using RecordId = std::uint32_t;

struct SampleRecord {
  RecordId id = 0;
  ModalityId modality = ModalityId::Image;
  std::string source;
  std::string surface_label;
  Tensor features;     // 1 x feature_dim
  Tensor description;  // 1 x dim, unit norm
};

struct DatasetConfig {
  std::array<std::size_t, kNumModalities> records_per_class = {300, 300, 150, 150, 150, 150, 150};
  // Semantic noise of the source samples; student sources are weaker sensors.
  std::array<double, kNumModalities> record_sigma = {1.3, 1.1, 1.7, 1.7, 1.7, 1.7, 1.7};
  double description_sigma = 0.3;
  // Fraction of records whose surface label is outside the synonym table.
  double unknown_label_rate = 0.005;
  // Targets for combination sizes 2, 3, 4, 5 as fractions of `total`.
  std::array<double, 4> proportions = {0.46, 0.15, 0.16, 0.17};
  std::size_t train_total = 10000;
  std::size_t eval_total = 12000;

  void validate() const;
};

// Records of every modality; ids are positions in `records`.
class RecordStore {
 public:
  RecordStore() = default;
  explicit RecordStore(std::vector<SampleRecord> records);

  const std::vector<SampleRecord>& records() const { return records_; }
  const SampleRecord& at(RecordId id) const;
  std::vector<const SampleRecord*> of_modality(ModalityId m) const;
  std::size_t size() const { return records_.size(); }

  void save(const std::filesystem::path& dir) const;
  static RecordStore load(const std::filesystem::path& dir);

 private:
  std::vector<SampleRecord> records_;
};

// Draws records for every modality from the world. Nine named sources, each
// with its own preferred surface vocabulary, produce the seven modalities.
RecordStore generate_records(const SemanticWorld& world, const DatasetConfig& cfg, std::uint64_t seed);

struct LabelAlignment {
  std::map<RecordId, std::size_t> canonical;
  std::vector<std::pair<RecordId, std::string>> rejected;

  std::string rejection_report() const;
};

LabelAlignment align_labels(std::span<const SampleRecord> records, const SynonymTable& table);

struct MatchedPair {
  RecordId a = 0;
  RecordId b = 0;
  double cosine = 0.0;
};

struct MatchResult {
  std::vector<MatchedPair> pairs;
  std::vector<RecordId> unmatched_a;
  std::vector<RecordId> unmatched_b;
};

// One-to-one greedy matching on description cosine within each canonical
// label: repeatedly takes the globally best unmatched pair, ties to the lower
// (a, b) id pair. Records absent from `alignment` are ignored.
MatchResult match_samples(std::span<const SampleRecord* const> a, std::span<const SampleRecord* const> b,
                          const LabelAlignment& alignment);

// Pairwise matchings between all modalities, queried by record.
class MatchIndex {
 public:
  static MatchIndex build(const RecordStore& store, const LabelAlignment& alignment);
  std::optional<RecordId> partner(RecordId record, ModalityId other) const;
  std::size_t cross_label_pairs() const { return cross_label_pairs_; }

 private:
  std::map<std::pair<RecordId, ModalityId>, RecordId> partners_;
  std::size_t cross_label_pairs_ = 0;
};

struct CombinationSample {
  std::uint32_t id = 0;
  std::size_t label = 0;
  // Sorted by modality.
  std::vector<std::pair<ModalityId, RecordId>> members;

  std::size_t size() const { return members.size(); }
  std::vector<ModalityId> modalities() const;
  bool contains(ModalityId m) const;
};

// "image+text+touch", modalities in canonical order.
std::string combination_key(std::span<const ModalityId> modalities);

struct DatasetManifest {
  std::vector<CombinationSample> samples;
  std::array<double, 4> proportions{};
  std::size_t total = 0;
  std::uint64_t seed = 0;
  std::uint64_t source_hash = 0;

  std::string serialize() const;
  static DatasetManifest parse(const std::string& text);
  std::uint64_t hash() const;
  // count of samples with n members / total
  double realized_proportion(std::size_t n) const;
};

struct ManifestRequest {
  std::array<double, 4> proportions = {0.46, 0.15, 0.16, 0.17};
  std::size_t total = 10000;
  std::uint64_t seed = 0;
  // If set, only these combinations are drawn (uniformly), each sample's size
  // follows the combination. Used for per-combination evaluation sets.
  std::vector<std::vector<ModalityId>> only_combinations;
};

DatasetManifest build_manifest(const RecordStore& store, const LabelAlignment& alignment,
                               const MatchIndex& matches, const ManifestRequest& request);

// Convenience: records -> alignment -> matching -> manifest.
struct BuiltDataset {
  RecordStore store;
  LabelAlignment alignment;
  DatasetManifest manifest;
};
BuiltDataset build_dataset(const SemanticWorld& world, const DatasetConfig& cfg, std::size_t total,
                           std::uint64_t seed);

struct NoiseSpec {
  // nullopt: one modality chosen uniformly at random per sample.
  std::optional<ModalityId> target;
  // 0 leaves features untouched, 1 replaces them with a Gaussian draw at the
  // original feature norm; values in between interpolate.
  double magnitude = 1.0;
  std::uint64_t seed = 0;
};

using FeatureMap = std::map<ModalityId, Tensor>;

struct NoisyFeatures {
  FeatureMap features;
  std::optional<ModalityId> perturbed;
};

FeatureMap gather_features(const CombinationSample& sample, const RecordStore& store);

// Perturbs exactly one modality of the sample. The draw depends only on
// (spec.seed, sample.id), so repeated calls agree.
NoisyFeatures inject_noise(const CombinationSample& sample, const FeatureMap& features,
                           const NoiseSpec& spec);

}  // namespace omnibind
