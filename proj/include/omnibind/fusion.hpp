#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "omnibind/autodiff.hpp"
#include "omnibind/dataset.hpp"
#include "omnibind/optim.hpp"
#include "omnibind/world.hpp"

namespace omnibind {

struct Prediction {
  ModalityId modality = ModalityId::Image;
  std::size_t label = 0;
  Tensor scores;  // 1 x C cosine similarities
};

// Index of the largest entry of a 1 x C row; ties go to the lowest index.
std::size_t argmax(const Tensor& scores);

// CLS(.): one prediction per present modality, in modality order.
std::vector<Prediction> classify_cls(const std::map<ModalityId, Tensor>& embeddings,
                                     const Tensor& label_embeddings);

using NegativeSet = std::set<std::size_t>;

// Distinct wrong predictions; if there are none, one seeded class != truth.
NegativeSet select_negatives(std::span<const Prediction> predictions, std::size_t true_label,
                             std::size_t num_classes, Rng& rng);
// One uniformly drawn class != truth (the negative-label ablation).
NegativeSet random_negative(std::size_t true_label, std::size_t num_classes, Rng& rng);

// -log(exp(m.pos/t) / (exp(m.pos/t) + sum_neg exp(m.neg/t))), 1 x 1.
Var loss_stage2(const Var& fused, const Tensor& positive, const Tensor& negatives, double temperature);

// A fusion strategy maps the n x d stack of modality embeddings (rows in
// `modalities` order) to one unit row.
class FusionModel {
 public:
  virtual ~FusionModel() = default;
  virtual std::string kind() const = 0;
  virtual Var fuse(Tape& tape, std::span<const ModalityId> modalities, const Tensor& tokens) const = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  virtual std::vector<const Parameter*> parameters() const = 0;
  virtual std::unique_ptr<FusionModel> clone() const = 0;

  Tensor fuse_value(std::span<const ModalityId> modalities, const Tensor& tokens) const;
};

struct AfParams {
  std::size_t dim = 32;
  std::size_t heads = 4;
  bool residual = true;
};

// E_m = normalize(mean(SA(tokens))), one multi-head self-attention block
// Y = X + concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h) W_o, no positional input.
class AdaptiveFusion final : public FusionModel {
 public:
  AdaptiveFusion() = default;
  // W_q, W_k, W_v ~ N(0, 1/d); W_o starts at zero.
  AdaptiveFusion(const AfParams& params, Rng& rng);
  // Zero output map: the normalized mean-fusion baseline.
  static AdaptiveFusion mean_baseline(const AfParams& params);

  std::string kind() const override { return "af"; }
  const AfParams& config() const { return params_; }
  Var fuse(Tape& tape, std::span<const ModalityId> modalities, const Tensor& tokens) const override;
  Var fuse(Tape& tape, const Tensor& tokens) const;
  std::vector<Parameter*> parameters() override;
  std::vector<const Parameter*> parameters() const override;
  std::unique_ptr<FusionModel> clone() const override { return std::make_unique<AdaptiveFusion>(*this); }

  Parameter& wq() { return wq_; }
  Parameter& wk() { return wk_; }
  Parameter& wv() { return wv_; }
  Parameter& wo() { return wo_; }

 private:
  AfParams params_;
  Parameter wq_, wk_, wv_, wo_;
};

Tensor fuse_sa(std::span<const Tensor> embeddings, const AdaptiveFusion& af);

// Affine map over the concatenation of seven modality slots (zeros for
// absent modalities). Starts as the normalized sum of present embeddings.
class LinearFusion final : public FusionModel {
 public:
  LinearFusion() = default;
  explicit LinearFusion(std::size_t dim);

  std::string kind() const override { return "linear"; }
  Var fuse(Tape& tape, std::span<const ModalityId> modalities, const Tensor& tokens) const override;
  std::vector<Parameter*> parameters() override { return {&w_, &b_}; }
  std::vector<const Parameter*> parameters() const override { return {&w_, &b_}; }
  std::unique_ptr<FusionModel> clone() const override { return std::make_unique<LinearFusion>(*this); }

 private:
  Parameter w_, b_;
};

// y_i = x_i + vec(x_i xbar^T) W_p, then mean and normalize; W_p starts at zero.
class OuterProductFusion final : public FusionModel {
 public:
  OuterProductFusion() = default;
  explicit OuterProductFusion(std::size_t dim);

  std::string kind() const override { return "outer"; }
  Var fuse(Tape& tape, std::span<const ModalityId> modalities, const Tensor& tokens) const override;
  std::vector<Parameter*> parameters() override { return {&wp_}; }
  std::vector<const Parameter*> parameters() const override { return {&wp_}; }
  std::unique_ptr<FusionModel> clone() const override {
    return std::make_unique<OuterProductFusion>(*this);
  }

 private:
  std::size_t dim_ = 0;
  Parameter wp_;
};

// Checkpoint: one OBT1 tensor per parameter plus fusion.json (kind, dims,
// heads, residual, seed, config hash).
void save_fusion(const FusionModel& model, const std::filesystem::path& dir, std::uint64_t seed,
                 const std::string& config_hash);
std::unique_ptr<FusionModel> load_fusion(const std::filesystem::path& dir);

// Per-record embeddings under frozen encoders, indexed by record id.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  EmbeddingCache(const Encoders& encoders, const RecordStore& store);
  const Tensor& at(RecordId id) const { return rows_.at(id); }

 private:
  std::vector<Tensor> rows_;
};

// Embeddings of one combination sample, with optional noise applied to raw
// features before re-encoding the perturbed modality.
std::map<ModalityId, Tensor> sample_embeddings(const CombinationSample& sample, const EmbeddingCache& cache,
                                               const Encoders& encoders, const RecordStore& store,
                                               const NoiseSpec* noise = nullptr);

enum class NegativeMode {
  Predicted,     // wrong CLS predictions (seeded fallback when all are right)
  Random,        // one uniformly drawn wrong label
  All,           // every wrong label
  AllPredicted,  // every wrong label, wrong CLS predictions counted twice
};

struct Stage2Config {
  double temperature = 0.2;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  double max_grad_norm = 1.0;
  NegativeMode negatives = NegativeMode::AllPredicted;
  // Probability that a training sample gets one random modality replaced by noise.
  double noise_prob = 1.0;
  double noise_magnitude = 1.0;
  std::size_t heads = 4;
  bool residual = true;
  // Fraction of the training manifest held out for checkpoint selection.
  double dev_fraction = 0.1;

  void validate() const;
};

struct Stage2CurveRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct Stage2Result {
  std::unique_ptr<FusionModel> model;
  std::vector<Stage2CurveRow> curve;
  std::vector<double> dev_accuracy;  // per epoch, %
  std::size_t best_epoch = 0;
};

struct Stage2Data {
  const SemanticWorld* world = nullptr;
  const Encoders* encoders = nullptr;
  const RecordStore* store = nullptr;
  const DatasetManifest* manifest = nullptr;
};

// Trains `init` (mutating only its parameters) on the manifest with the
// stage-2 loss. Encoders are read-only.
Stage2Result train_stage2(const Stage2Data& data, const FusionModel& init, const Stage2Config& cfg,
                          std::uint64_t seed);

// n = 1 uses the single modality's CLS prediction, n > 1 the fused embedding.
std::size_t infer(const std::map<ModalityId, Tensor>& embeddings, const FusionModel& model,
                  const Tensor& label_embeddings);

}  // namespace omnibind
