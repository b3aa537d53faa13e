#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "omnibind/cad.hpp"
#include "omnibind/dataset.hpp"
#include "omnibind/evalkit.hpp"
#include "omnibind/fusion.hpp"

namespace omnibind {

struct RunConfig {
  std::uint64_t seed = 42;
  WorldParams world;  // world.seed is replaced by `seed`
  CadConfig stage1;
  Stage2Config stage2;
  // Objective of the "w/o negative labels" ablation model.
  NegativeMode ablation_negatives = NegativeMode::Random;
  DatasetConfig dataset;
  // Samples per combination in the robustness manifest (all 112 combinations).
  std::size_t robustness_per_combination = 1000;
  double eval_noise_magnitude = 1.0;
  std::filesystem::path out = "runs/default";

  // Canonical JSON (every field, `out` included).
  std::string to_json() const;
  // Fields missing from `text` keep their defaults; unknown or mistyped
  // fields raise ConfigError naming the field path.
  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig load(const std::filesystem::path& path);
  // fnv1a over the canonical JSON without `out`, as 16 hex digits.
  std::string hash() const;
  void validate() const;
};

std::string negative_mode_name(NegativeMode mode);
NegativeMode parse_negative_mode(const std::string& name);

// Artifact layout under RunConfig::out.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path world() const { return root / "world"; }
  std::filesystem::path train_data() const { return root / "data" / "train"; }
  std::filesystem::path eval_data() const { return root / "data" / "eval"; }
  std::filesystem::path stage1() const { return root / "stage1"; }
  std::filesystem::path stage2() const { return root / "stage2"; }
  std::filesystem::path eval() const { return root / "eval"; }
  // Timings and other run-dependent notes; excluded from determinism checks.
  std::filesystem::path log() const { return root / "run.log"; }
};

// Stage-1 checkpoint: one directory of head tensors plus stage1.json.
void save_stage1(const Stage1Result& result, const std::filesystem::path& dir, std::uint64_t seed,
                 const std::string& config_hash);
std::map<ModalityId, StudentHead> load_stage1(const std::filesystem::path& dir, const SemanticWorld& world);

// Stage-2 model names as written under stage2/.
inline constexpr const char* kAfModel = "af";
inline constexpr const char* kAfNoNegModel = "af_noneg";
inline constexpr const char* kLinearModel = "linear";
inline constexpr const char* kOuterModel = "outer";
inline constexpr const char* kMeanModel = "mean";

// Each stage reads its predecessors' files and throws MissingArtifactError
// naming the first missing one.
void run_gen_world(const RunConfig& cfg);
void run_build_data(const RunConfig& cfg);
void run_train_stage1(const RunConfig& cfg);
void run_train_stage2(const RunConfig& cfg);
void run_eval(const RunConfig& cfg);
std::string run_report(const RunConfig& cfg, TableKind kind);

}  // namespace omnibind
