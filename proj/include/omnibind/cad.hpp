#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "omnibind/autodiff.hpp"
#include "omnibind/world.hpp"

namespace omnibind {

// How pairwise similarity rows are turned into distributions before the KL terms.
enum class CorrespondenceNorm {
  Softmax,        // softmax(G / tau)
  ShiftedCosine,  // (1 + G) / rowsum, valid for unit rows
};

struct StudentSchedule {
  std::size_t batch_size = 32;
  double lr = 5e-4;
};

struct CadConfig {
  double temperature = 0.07;
  double lambda_cr = 100.0;
  double lambda_se = 100.0;
  double divisor = 3.0;
  CorrespondenceNorm norm = CorrespondenceNorm::Softmax;
  std::size_t epochs = 20;
  std::size_t warmup_steps = 20;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  std::size_t hidden = 0;  // 0: 2 * dim
  std::size_t teacher_per_class = 200;
  std::size_t student_per_class = 40;
  std::size_t val_per_class = 10;
  std::size_t heldout_per_class = 25;
  // Indexed by index_of(ModalityId); teacher slots unused.
  std::array<StudentSchedule, kNumModalities> schedules = {
      StudentSchedule{}, StudentSchedule{},
      StudentSchedule{32, 5e-4},   // audio
      StudentSchedule{32, 5e-4},   // point cloud
      StudentSchedule{8, 5e-4},    // event
      StudentSchedule{32, 5e-4},   // touch
      StudentSchedule{16, 1e-3}};  // thermal
  // Worker threads for the per-modality runs; 0 or 1 runs sequentially.
  std::size_t threads = 0;

  void validate() const;
};

// Index-aligned student/image/label triples.
struct CadBatch {
  Tensor student_raw;
  Tensor image_raw;
  std::vector<std::size_t> labels;
};

// Distributions over a similarity matrix, per the configured normalization.
Tensor correspondence(const Tensor& similarity, double temperature, CorrespondenceNorm norm);

// L_in: InfoNCE of student rows against text rows, positives on the diagonal.
Var loss_in(const Var& student, const Var& text, double temperature);
// D_t^r: distributions of text-vs-image similarities (teacher side, detached).
Tensor teacher_cross_correspondence(const Tensor& text, const Tensor& image, double temperature,
                                    CorrespondenceNorm norm = CorrespondenceNorm::Softmax);
// L_cr = KL(D_t^r || dist(text * student^T)).
Var loss_cr(const Tensor& target, const Tensor& text, const Var& student, double temperature,
            CorrespondenceNorm norm = CorrespondenceNorm::Softmax);
// D_t^l: mean of image and text self-similarity distributions (detached).
Tensor teacher_self_correspondence(const Tensor& image, const Tensor& text, double temperature,
                                   CorrespondenceNorm norm = CorrespondenceNorm::Softmax);
// L_se = KL(D_t^l || dist(student * student^T)).
Var loss_se(const Tensor& target, const Var& student, double temperature,
            CorrespondenceNorm norm = CorrespondenceNorm::Softmax);

struct Stage1Terms {
  Var in, cr, se, total;
};
// Records the full stage-1 objective for one batch on `tape`.
Stage1Terms stage1_terms(Tape& tape, const SemanticWorld& world, const CadBatch& batch,
                         ModalityId modality, const StudentHead& head, const CadConfig& cfg);

struct Stage1Loss {
  double in = 0, cr = 0, se = 0, total = 0;
  Gradients grads;
};
Stage1Loss loss_stage1(const SemanticWorld& world, const CadBatch& batch, ModalityId modality,
                       const StudentHead& head, const CadConfig& cfg);

struct Stage1CurveRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  ModalityId modality = ModalityId::Audio;
  double in = 0, cr = 0, se = 0, total = 0;
};

struct ModalityAlignment {
  double initial_r1 = 0;  // held-out student -> label text R@1 before training, %
  double final_r1 = 0;    // same, for the retained head, %
  double best_val_r1 = 0;
  std::size_t best_epoch = 0;
  double first_epoch_loss = 0;
  double last_epoch_loss = 0;
};

struct Stage1Result {
  std::vector<ModalityId> order;
  std::map<ModalityId, StudentHead> heads;
  std::map<ModalityId, ModalityAlignment> alignment;
  std::vector<Stage1CurveRow> curve;
};

// Per-modality sample pools used by stage-1 training and evaluation.
struct StudentSplits {
  Tensor train, val, heldout;
  std::vector<std::size_t> train_labels, val_labels, heldout_labels;
  std::vector<Tensor> image_pool;  // per class, teacher_per_class x image feature dim
};
StudentSplits make_student_splits(const SemanticWorld& world, ModalityId modality,
                                  const CadConfig& cfg, std::uint64_t seed);

// Percentage of rows of `embeddings` whose nearest label embedding is the true label.
double retrieval_r1(const Tensor& embeddings, std::span<const std::size_t> labels,
                    const Tensor& label_embeddings);

// Trains one head per student modality, in a seeded random order. Heads
// are the best-validation snapshot of each run.
Stage1Result train_stage1(const SemanticWorld& world, const CadConfig& cfg, std::uint64_t seed);

}  // namespace omnibind
