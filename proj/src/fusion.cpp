#include "omnibind/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "omnibind/error.hpp"
#include "omnibind/serialize.hpp"

namespace omnibind {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

void require_tokens(const Tensor& tokens, std::size_t dim, const char* what) {
  if (tokens.rows() == 0) throw ValidationError(std::string(what) + ": no modality embeddings");
  if (tokens.cols() != dim) {
    throw DimensionError(std::string(what) + ": embeddings are " + std::to_string(tokens.cols()) +
                         "-dimensional, fusion expects " + std::to_string(dim));
  }
}

// Row-wise Kronecker product of two 1 x d rows: out[i*d + j] = a[i] * b[j].
Var kron_row(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  const std::size_t n = a.cols(), m = b.cols();
  Tensor out(1, n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.value()[i] * b.value()[j];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib, n, m](const Tensor& g, Tape& tp) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    Tensor ga(1, n), gb(1, m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        ga[i] += g[i * m + j] * bv[j];
        gb[j] += g[i * m + j] * av[i];
      }
    }
    tp.accumulate(ia, ga);
    tp.accumulate(ib, gb);
  });
}

Tensor stack_embeddings(const std::map<ModalityId, Tensor>& embeddings, std::vector<ModalityId>& mods) {
  std::vector<Tensor> rows;
  for (const auto& [m, e] : embeddings) {
    mods.push_back(m);
    rows.push_back(e);
  }
  return stack_rows(rows);
}

}  // namespace

std::size_t argmax(const Tensor& scores) {
  if (scores.empty()) throw ValidationError("argmax of an empty score row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::vector<Prediction> classify_cls(const std::map<ModalityId, Tensor>& embeddings,
                                     const Tensor& label_embeddings) {
  if (embeddings.empty()) throw ValidationError("classify_cls: no modality embeddings");
  if (label_embeddings.rows() == 0) throw ValidationError("classify_cls: label batch is empty");
  std::vector<Prediction> out;
  for (const auto& [m, e] : embeddings) {
    Prediction p;
    p.modality = m;
    p.scores = matmul_nt(e, label_embeddings);
    p.label = argmax(p.scores);
    out.push_back(std::move(p));
  }
  return out;
}

NegativeSet random_negative(std::size_t true_label, std::size_t num_classes, Rng& rng) {
  if (num_classes < 2) throw ConfigError("negative selection needs at least two classes");
  if (true_label >= num_classes) throw ValidationError("true label out of range");
  std::size_t c = rng.below(num_classes - 1);
  if (c >= true_label) ++c;
  return {c};
}

NegativeSet select_negatives(std::span<const Prediction> predictions, std::size_t true_label,
                             std::size_t num_classes, Rng& rng) {
  if (num_classes < 2) throw ConfigError("negative selection needs at least two classes");
  if (predictions.empty()) throw ValidationError("select_negatives: no predictions");
  if (true_label >= num_classes) throw ValidationError("true label out of range");
  NegativeSet out;
  for (const Prediction& p : predictions) {
    if (p.label != true_label) out.insert(p.label);
  }
  if (out.empty()) out = random_negative(true_label, num_classes, rng);
  return out;
}

Var loss_stage2(const Var& fused, const Tensor& positive, const Tensor& negatives, double temperature) {
  if (negatives.rows() == 0) throw ValidationError("loss_stage2: empty negative set");
  if (positive.rows() != 1 || positive.cols() != fused.cols() || negatives.cols() != fused.cols()) {
    throw DimensionError("loss_stage2: positive " + positive.shape_string() + " / negatives " +
                         negatives.shape_string() + " do not match fused " + fused.value().shape_string());
  }
  std::vector<Tensor> rows = {positive, negatives};
  const Var prompts = fused.tape()->constant(stack_rows(rows));
  const std::size_t target = 0;
  return cross_entropy_rows(matmul_nt(fused, prompts), std::span(&target, 1), temperature);
}

Tensor FusionModel::fuse_value(std::span<const ModalityId> modalities, const Tensor& tokens) const {
  Tape tape;
  return fuse(tape, modalities, tokens).value();
}

AdaptiveFusion::AdaptiveFusion(const AfParams& params, Rng& rng) : params_(params) {
  if (params.heads == 0 || params.dim % params.heads != 0) {
    throw ConfigError("fusion.heads must divide the embedding dim (" + std::to_string(params.dim) + ")");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(params.dim));
  wq_ = {"af.wq", gaussian(params.dim, params.dim, s, rng)};
  wk_ = {"af.wk", gaussian(params.dim, params.dim, s, rng)};
  wv_ = {"af.wv", gaussian(params.dim, params.dim, s, rng)};
  wo_ = {"af.wo", Tensor(params.dim, params.dim)};
}

AdaptiveFusion AdaptiveFusion::mean_baseline(const AfParams& params) {
  Rng rng(0);
  return AdaptiveFusion(params, rng);
}

Var AdaptiveFusion::fuse(Tape& tape, std::span<const ModalityId>, const Tensor& tokens) const {
  return fuse(tape, tokens);
}

Var AdaptiveFusion::fuse(Tape& tape, const Tensor& tokens) const {
  require_tokens(tokens, params_.dim, "fuse_sa");
  const std::size_t dh = params_.dim / params_.heads;
  const Var x = tape.constant(tokens);
  const Var q = matmul(x, tape.param(wq_));
  const Var k = matmul(x, tape.param(wk_));
  const Var v = matmul(x, tape.param(wv_));
  std::vector<Var> heads;
  for (std::size_t h = 0; h < params_.heads; ++h) {
    const Var scores = matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh));
    const Var attn = rowwise_softmax(scores, std::sqrt(static_cast<double>(dh)));
    heads.push_back(matmul(attn, slice_cols(v, h * dh, dh)));
  }
  Var y = matmul(concat_cols(heads), tape.param(wo_));
  if (params_.residual) y = add(x, y);
  return l2_normalize_rows(mean_rows(y));
}

std::vector<Parameter*> AdaptiveFusion::parameters() { return {&wq_, &wk_, &wv_, &wo_}; }
std::vector<const Parameter*> AdaptiveFusion::parameters() const { return {&wq_, &wk_, &wv_, &wo_}; }

Tensor fuse_sa(std::span<const Tensor> embeddings, const AdaptiveFusion& af) {
  if (embeddings.empty()) throw ValidationError("fuse_sa: no modality embeddings");
  Tape tape;
  return af.fuse(tape, stack_rows(embeddings)).value();
}

LinearFusion::LinearFusion(std::size_t dim) {
  Tensor w(kNumModalities * dim, dim);
  for (std::size_t s = 0; s < kNumModalities; ++s) {
    for (std::size_t i = 0; i < dim; ++i) w(s * dim + i, i) = 1.0;
  }
  w_ = {"linear.w", std::move(w)};
  b_ = {"linear.b", Tensor(1, dim)};
}

Var LinearFusion::fuse(Tape& tape, std::span<const ModalityId> modalities, const Tensor& tokens) const {
  const std::size_t dim = b_.value.cols();
  require_tokens(tokens, dim, "linear fusion");
  if (modalities.size() != tokens.rows()) throw DimensionError("linear fusion: one modality per token row");
  const Var x = tape.constant(tokens);
  std::vector<Var> slots(kNumModalities);
  for (std::size_t s = 0; s < kNumModalities; ++s) slots[s] = tape.constant(Tensor(1, dim));
  for (std::size_t i = 0; i < modalities.size(); ++i) slots[index_of(modalities[i])] = row(x, i);
  const Var y = add_row(matmul(concat_cols(slots), tape.param(w_)), tape.param(b_));
  return l2_normalize_rows(y);
}

OuterProductFusion::OuterProductFusion(std::size_t dim) : dim_(dim) {
  wp_ = {"outer.wp", Tensor(dim * dim, dim)};
}

Var OuterProductFusion::fuse(Tape& tape, std::span<const ModalityId>, const Tensor& tokens) const {
  require_tokens(tokens, dim_, "outer-product fusion");
  const Var x = tape.constant(tokens);
  const Var xbar = mean_rows(x);
  const Var wp = tape.param(wp_);
  std::vector<Var> rows;
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    const Var xi = row(x, i);
    rows.push_back(add(xi, matmul(kron_row(xi, xbar), wp)));
  }
  return l2_normalize_rows(mean_rows(stack_rows(rows)));
}

void save_fusion(const FusionModel& model, const std::filesystem::path& dir, std::uint64_t seed,
                 const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["kind"] = model.kind();
  if (const auto* af = dynamic_cast<const AdaptiveFusion*>(&model)) {
    j["dim"] = af->config().dim;
    j["heads"] = af->config().heads;
    j["residual"] = af->config().residual;
  } else {
    j["dim"] = model.parameters().back()->value.cols();
  }
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const Parameter* p : model.parameters()) {
    write_tensor(dir / (p->name + ".obt"), p->value);
    tensors.push_back(p->name + ".obt");
  }
  j["tensors"] = tensors;
  write_text(dir / "fusion.json", j.dump(2) + "\n");
}

std::unique_ptr<FusionModel> load_fusion(const std::filesystem::path& dir) {
  const auto manifest = dir / "fusion.json";
  if (!std::filesystem::exists(manifest)) {
    throw MissingArtifactError("fusion checkpoint not found: " + manifest.string() +
                                   " (run train-stage2 first)",
                               manifest.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  std::unique_ptr<FusionModel> model;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    const auto dim = j.at("dim").get<std::size_t>();
    if (kind == "af") {
      AfParams p{dim, j.at("heads").get<std::size_t>(), j.at("residual").get<bool>()};
      model = std::make_unique<AdaptiveFusion>(AdaptiveFusion::mean_baseline(p));
    } else if (kind == "linear") {
      model = std::make_unique<LinearFusion>(dim);
    } else if (kind == "outer") {
      model = std::make_unique<OuterProductFusion>(dim);
    } else {
      throw IoError(manifest.string() + ": unknown fusion kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  for (Parameter* p : model->parameters()) {
    Tensor t = read_tensor(dir / (p->name + ".obt"));
    if (!t.same_shape(p->value)) {
      throw IoError(dir.string() + ": " + p->name + " has shape " + t.shape_string() + ", expected " +
                    p->value.shape_string());
    }
    p->value = std::move(t);
  }
  return model;
}

EmbeddingCache::EmbeddingCache(const Encoders& encoders, const RecordStore& store) {
  rows_.reserve(store.size());
  for (const auto& r : store.records()) rows_.push_back(encoders.encode(r.modality, r.features));
}

std::map<ModalityId, Tensor> sample_embeddings(const CombinationSample& sample, const EmbeddingCache& cache,
                                               const Encoders& encoders, const RecordStore& store,
                                               const NoiseSpec* noise) {
  std::map<ModalityId, Tensor> out;
  for (const auto& [m, id] : sample.members) out.emplace(m, cache.at(id));
  if (noise != nullptr) {
    const NoisyFeatures noisy = inject_noise(sample, gather_features(sample, store), *noise);
    const ModalityId m = *noisy.perturbed;
    out[m] = encoders.encode(m, noisy.features.at(m));
  }
  return out;
}

void Stage2Config::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("stage2.temperature must be positive");
  if (epochs == 0) throw ConfigError("stage2.epochs must be positive");
  if (batch_size == 0) throw ConfigError("stage2.batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("stage2.lr must be positive");
  if (noise_prob < 0.0 || noise_prob > 1.0) throw ConfigError("stage2.noise_prob must be in [0, 1]");
  if (dev_fraction < 0.0 || dev_fraction >= 1.0) throw ConfigError("stage2.dev_fraction must be in [0, 1)");
  if (heads == 0) throw ConfigError("stage2.heads must be positive");
}

std::size_t infer(const std::map<ModalityId, Tensor>& embeddings, const FusionModel& model,
                  const Tensor& label_embeddings) {
  if (embeddings.empty()) throw ValidationError("infer: empty modality combination");
  if (embeddings.size() == 1) return argmax(matmul_nt(embeddings.begin()->second, label_embeddings));
  std::vector<ModalityId> mods;
  const Tensor tokens = stack_embeddings(embeddings, mods);
  return argmax(matmul_nt(model.fuse_value(mods, tokens), label_embeddings));
}

Stage2Result train_stage2(const Stage2Data& data, const FusionModel& init, const Stage2Config& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  if (data.world == nullptr || data.encoders == nullptr || data.store == nullptr || data.manifest == nullptr) {
    throw ValidationError("train_stage2: incomplete inputs");
  }
  const SemanticWorld& world = *data.world;
  const auto& samples = data.manifest->samples;
  if (samples.empty()) throw ValidationError("train_stage2: empty training manifest");
  const std::size_t num_classes = world.num_classes();
  const Tensor labels = label_embeddings(world);
  const EmbeddingCache cache(*data.encoders, *data.store);

  Rng rng(mix_seed(seed, 0x52));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const auto dev_count = static_cast<std::size_t>(cfg.dev_fraction * static_cast<double>(samples.size()));
  const std::vector<std::size_t> dev(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(dev_count));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(dev_count), order.end());
  if (train.empty()) throw ValidationError("train_stage2: no training samples after the dev split");

  Stage2Result result;
  result.model = init.clone();
  std::vector<Parameter*> params = result.model->parameters();
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.warmup_steps = cfg.warmup_steps;
  ac.total_steps = steps_per_epoch * cfg.epochs;
  AdamW opt(ac, params);

  // Dev samples see the same noise rate as training, with a fixed draw.
  const NoiseSpec dev_noise{std::nullopt, cfg.noise_magnitude, mix_seed(seed, 0xde7)};
  auto dev_accuracy = [&](const FusionModel& model) {
    std::size_t correct = 0;
    for (std::size_t i : dev) {
      const bool noisy = Rng(mix_seed(dev_noise.seed, samples[i].id)).uniform() < cfg.noise_prob;
      const auto emb =
          sample_embeddings(samples[i], cache, *data.encoders, *data.store, noisy ? &dev_noise : nullptr);
      correct += infer(emb, model, labels) == samples[i].label ? 1 : 0;
    }
    return dev.empty() ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(dev.size());
  };

  double best = -1.0;
  std::unique_ptr<FusionModel> best_model = result.model->clone();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train);
    const NoiseSpec noise{std::nullopt, cfg.noise_magnitude, mix_seed(seed, 0x1000 + epoch)};
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(train.size(), b + cfg.batch_size);
      Tape tape;
      std::vector<Var> losses;
      for (std::size_t i = b; i < end; ++i) {
        const CombinationSample& s = samples[train[i]];
        const bool noisy = cfg.noise_prob > 0.0 && rng.uniform() < cfg.noise_prob;
        const auto emb = sample_embeddings(s, cache, *data.encoders, *data.store, noisy ? &noise : nullptr);
        const auto preds = classify_cls(emb, labels);
        std::vector<Tensor> neg_rows;
        switch (cfg.negatives) {
          case NegativeMode::Predicted:
            for (std::size_t c : select_negatives(preds, s.label, num_classes, rng)) {
              neg_rows.push_back(labels.row_copy(c));
            }
            break;
          case NegativeMode::Random:
            for (std::size_t c : random_negative(s.label, num_classes, rng)) neg_rows.push_back(labels.row_copy(c));
            break;
          case NegativeMode::AllPredicted:
            for (const Prediction& p : preds) {
              if (p.label != s.label) neg_rows.push_back(labels.row_copy(p.label));
            }
            [[fallthrough]];
          case NegativeMode::All:
            for (std::size_t c = 0; c < num_classes; ++c) {
              if (c != s.label) neg_rows.push_back(labels.row_copy(c));
            }
            break;
        }
        std::vector<ModalityId> mods;
        const Tensor tokens = stack_embeddings(emb, mods);
        const Var fused = result.model->fuse(tape, mods, tokens);
        losses.push_back(loss_stage2(fused, labels.row_copy(s.label), stack_rows(neg_rows), cfg.temperature));
      }
      const Var total = scale(sum(stack_rows(losses)), 1.0 / static_cast<double>(losses.size()));
      const double value = total.value()[0];
      if (!std::isfinite(value)) {
        throw Error("stage-2 loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(step));
      }
      Gradients grads = tape.backward(total);
      clip_grad_norm(grads, params, cfg.max_grad_norm);
      opt.step(grads);
      result.curve.push_back({epoch, step, value});
      ++step;
    }
    const double acc = dev_accuracy(*result.model);
    result.dev_accuracy.push_back(acc);
    if (dev.empty() || acc >= best) {
      best = acc;
      best_model = result.model->clone();
      result.best_epoch = epoch;
    }
  }
  result.model = std::move(best_model);
  return result;
}

}  // namespace omnibind
