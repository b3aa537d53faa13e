#include "omnibind/cad.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

#include "omnibind/error.hpp"
#include "omnibind/optim.hpp"

namespace omnibind {

namespace {

void require_unit_batch(const Tensor& a, const Tensor& b, const char* op) {
  require_same_shape(a, b, op);
  if (a.rows() == 0) throw DimensionError(std::string(op) + ": empty batch");
}

Var student_distribution_kl(const Tensor& target, const Var& similarity, double temperature,
                            CorrespondenceNorm norm) {
  if (norm == CorrespondenceNorm::Softmax) return kl_rows_logits(target, similarity, temperature);
  return kl_rows(target, row_sum_normalize(add_scalar(similarity, 1.0)));
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct ModalityRun {
  StudentHead head;
  ModalityAlignment alignment;
  std::vector<Stage1CurveRow> curve;
};

ModalityRun train_modality(const SemanticWorld& world, ModalityId modality, const CadConfig& cfg,
                           std::uint64_t seed) {
  Rng rng(seed);
  const StudentSplits splits = make_student_splits(world, modality, cfg, mix_seed(seed, 1));
  const std::size_t hidden = cfg.hidden == 0 ? 2 * world.dim() : cfg.hidden;
  ModalityRun run;
  StudentHead head(modality, world.feature_dim(modality), hidden, world.dim(), rng);
  const Tensor labels = label_embeddings(world);
  run.alignment.initial_r1 =
      retrieval_r1(encode_student(world, splits.heldout, modality, head), splits.heldout_labels, labels);

  const StudentSchedule sched = cfg.schedules[index_of(modality)];
  const std::size_t n = splits.train.rows();
  const std::size_t per_epoch = (n + sched.batch_size - 1) / sched.batch_size;
  AdamW opt({.lr = sched.lr,
             .weight_decay = cfg.weight_decay,
             .warmup_steps = cfg.warmup_steps,
             .total_steps = per_epoch * cfg.epochs},
            head.parameters());

  StudentHead best = head;
  double best_val = -1.0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const std::size_t f = world.feature_dim(modality);
  const std::size_t fi = world.feature_dim(ModalityId::Image);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t step = 0; step < per_epoch; ++step) {
      const std::size_t begin = step * sched.batch_size;
      const std::size_t k = std::min(sched.batch_size, n - begin);
      CadBatch batch{Tensor(k, f), Tensor(k, fi), std::vector<std::size_t>(k)};
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t src = order[begin + i];
        const std::size_t c = splits.train_labels[src];
        std::copy_n(splits.train.row(src).begin(), f, batch.student_raw.row(i).begin());
        const Tensor& pool = splits.image_pool[c];
        std::copy_n(pool.row(rng.below(pool.rows())).begin(), fi, batch.image_raw.row(i).begin());
        batch.labels[i] = c;
      }
      Stage1Loss loss = loss_stage1(world, batch, modality, head, cfg);
      if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << "stage-1 loss for " << modality_name(modality) << " became non-finite at epoch "
            << epoch << " step " << step << " (in=" << loss.in << ", cr=" << loss.cr
            << ", se=" << loss.se << ")";
        throw Error(msg.str());
      }
      clip_grad_norm(loss.grads, opt.params(), cfg.max_grad_norm);
      opt.step(loss.grads);
      epoch_total += loss.total;
      run.curve.push_back({epoch, step, modality, loss.in, loss.cr, loss.se, loss.total});
    }
    const double mean_loss = epoch_total / static_cast<double>(per_epoch);
    if (epoch == 0) run.alignment.first_epoch_loss = mean_loss;
    run.alignment.last_epoch_loss = mean_loss;

    const double val =
        retrieval_r1(encode_student(world, splits.val, modality, head), splits.val_labels, labels);
    if (val >= best_val) {
      best_val = val;
      best = head;
      run.alignment.best_epoch = epoch;
    }
  }
  run.alignment.best_val_r1 = best_val;
  run.alignment.final_r1 =
      retrieval_r1(encode_student(world, splits.heldout, modality, best), splits.heldout_labels, labels);
  run.head = std::move(best);
  return run;
}

}  // namespace

void CadConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("cad.temperature must be positive");
  if (lambda_cr < 0.0 || lambda_se < 0.0) throw ConfigError("cad.lambda_* must be non-negative");
  if (!(divisor > 0.0)) throw ConfigError("cad.divisor must be positive");
  if (student_per_class == 0 || teacher_per_class == 0 || val_per_class == 0 ||
      heldout_per_class == 0) {
    throw ConfigError("cad sample budgets must be positive");
  }
  for (ModalityId m : kStudentModalities) {
    if (schedules[index_of(m)].batch_size == 0) throw ConfigError("cad batch size must be positive");
    if (schedules[index_of(m)].lr < 0.0) throw ConfigError("cad lr must be non-negative");
  }
}

Tensor correspondence(const Tensor& similarity, double temperature, CorrespondenceNorm norm) {
  if (norm == CorrespondenceNorm::Softmax) return rowwise_softmax(similarity, temperature);
  Tensor out = similarity;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double total = 0.0;
    for (double& v : out.row(i)) {
      v += 1.0;
      total += v;
    }
    for (double& v : out.row(i)) v /= total;
  }
  return out;
}

Var loss_in(const Var& student, const Var& text, double temperature) {
  require_unit_batch(student.value(), text.value(), "loss_in");
  std::vector<std::size_t> diagonal(student.rows());
  for (std::size_t i = 0; i < diagonal.size(); ++i) diagonal[i] = i;
  return cross_entropy_rows(matmul_nt(student, text), diagonal, temperature);
}

Tensor teacher_cross_correspondence(const Tensor& text, const Tensor& image, double temperature,
                                    CorrespondenceNorm norm) {
  require_unit_batch(text, image, "teacher_cross_correspondence");
  return correspondence(matmul_nt(text, image), temperature, norm);
}

Var loss_cr(const Tensor& target, const Tensor& text, const Var& student, double temperature,
            CorrespondenceNorm norm) {
  require_unit_batch(text, student.value(), "loss_cr");
  Tape& tape = *student.tape();
  return student_distribution_kl(target, matmul_nt(tape.constant(text), student), temperature, norm);
}

Tensor teacher_self_correspondence(const Tensor& image, const Tensor& text, double temperature,
                                   CorrespondenceNorm norm) {
  require_unit_batch(image, text, "teacher_self_correspondence");
  return scale(add(correspondence(matmul_nt(image, image), temperature, norm),
                   correspondence(matmul_nt(text, text), temperature, norm)),
               0.5);
}

Var loss_se(const Tensor& target, const Var& student, double temperature, CorrespondenceNorm norm) {
  if (student.rows() == 0) throw DimensionError("loss_se: empty batch");
  return student_distribution_kl(target, matmul_nt(student, student), temperature, norm);
}

Stage1Terms stage1_terms(Tape& tape, const SemanticWorld& world, const CadBatch& batch,
                         ModalityId modality, const StudentHead& head, const CadConfig& cfg) {
  const std::size_t k = batch.labels.size();
  if (k == 0) throw DimensionError("stage-1 batch is empty");
  if (batch.student_raw.rows() != k || batch.image_raw.rows() != k) {
    throw DimensionError("stage-1 batch rows are not index-aligned");
  }
  const double tau = cfg.temperature;
  const Tensor image = encode_teacher_image(world, batch.image_raw);
  const Tensor text = encode_teacher_text(world, batch.labels);
  const Var student = encode_student(tape, world, batch.student_raw, modality, head);

  Stage1Terms t;
  t.in = loss_in(student, tape.constant(text), tau);
  t.cr = loss_cr(teacher_cross_correspondence(text, image, tau, cfg.norm), text, student, tau, cfg.norm);
  t.se = loss_se(teacher_self_correspondence(image, text, tau, cfg.norm), student, tau, cfg.norm);
  t.total = scale(add(t.in, add(scale(t.cr, cfg.lambda_cr), scale(t.se, cfg.lambda_se))),
                  1.0 / cfg.divisor);
  return t;
}

Stage1Loss loss_stage1(const SemanticWorld& world, const CadBatch& batch, ModalityId modality,
                       const StudentHead& head, const CadConfig& cfg) {
  Tape tape;
  const Stage1Terms t = stage1_terms(tape, world, batch, modality, head, cfg);
  Stage1Loss out;
  out.in = t.in.value()[0];
  out.cr = t.cr.value()[0];
  out.se = t.se.value()[0];
  out.total = t.total.value()[0];
  out.grads = tape.backward(t.total);
  return out;
}

StudentSplits make_student_splits(const SemanticWorld& world, ModalityId modality,
                                  const CadConfig& cfg, std::uint64_t seed) {
  if (role_of(modality) != ModalityRole::Student) {
    throw ValidationError("stage-1 splits requested for teacher modality");
  }
  Rng rng(seed);
  const std::size_t c_count = world.num_classes();
  auto draw = [&](std::size_t per_class, Tensor& out, std::vector<std::size_t>& labels) {
    std::vector<Tensor> rows;
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        rows.push_back(world.sample_raw(modality, c, rng));
        labels.push_back(c);
      }
    }
    out = stack_rows(rows);
  };
  StudentSplits s;
  draw(cfg.student_per_class, s.train, s.train_labels);
  draw(cfg.val_per_class, s.val, s.val_labels);
  draw(cfg.heldout_per_class, s.heldout, s.heldout_labels);
  for (std::size_t c = 0; c < c_count; ++c) {
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < cfg.teacher_per_class; ++i) {
      rows.push_back(world.sample_raw(ModalityId::Image, c, rng));
    }
    s.image_pool.push_back(stack_rows(rows));
  }
  return s;
}

double retrieval_r1(const Tensor& embeddings, std::span<const std::size_t> labels,
                    const Tensor& label_embeddings) {
  if (embeddings.rows() != labels.size()) throw DimensionError("retrieval_r1: label count mismatch");
  if (labels.empty()) return 0.0;
  const Tensor scores = matmul_nt(embeddings, label_embeddings);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += argmax(scores.row(i)) == labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

Stage1Result train_stage1(const SemanticWorld& world, const CadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Stage1Result result;
  result.order.assign(kStudentModalities.begin(), kStudentModalities.end());
  Rng order_rng(mix_seed(seed, 0x0de5));
  order_rng.shuffle(result.order);

  std::vector<ModalityRun> runs(result.order.size());
  auto seed_for = [seed](ModalityId m) { return mix_seed(seed, 100 + index_of(m)); };
  if (cfg.threads > 1) {
    std::vector<std::future<ModalityRun>> pending;
    for (ModalityId m : result.order) {
      pending.push_back(std::async(std::launch::async, train_modality, std::cref(world), m,
                                   std::cref(cfg), seed_for(m)));
    }
    for (std::size_t i = 0; i < pending.size(); ++i) runs[i] = pending[i].get();
  } else {
    for (std::size_t i = 0; i < result.order.size(); ++i) {
      runs[i] = train_modality(world, result.order[i], cfg, seed_for(result.order[i]));
    }
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const ModalityId m = result.order[i];
    result.alignment[m] = runs[i].alignment;
    result.curve.insert(result.curve.end(), runs[i].curve.begin(), runs[i].curve.end());
    result.heads.emplace(m, std::move(runs[i].head));
  }
  return result;
}

}  // namespace omnibind
