#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "omnibind/autodiff.hpp"
#include "omnibind/rng.hpp"
#include "omnibind/tensor.hpp"

namespace omnibind {

enum class ModalityId : std::uint8_t { Image, Text, Audio, PointCloud, Event, Touch, Thermal };
enum class ModalityRole { Teacher, Student };

inline constexpr std::size_t kNumModalities = 7;
inline constexpr std::array<ModalityId, kNumModalities> kAllModalities = {
    ModalityId::Image, ModalityId::Text,  ModalityId::Audio,  ModalityId::PointCloud,
    ModalityId::Event, ModalityId::Touch, ModalityId::Thermal};
inline constexpr std::array<ModalityId, 5> kStudentModalities = {
    ModalityId::Audio, ModalityId::PointCloud, ModalityId::Event, ModalityId::Touch,
    ModalityId::Thermal};

constexpr ModalityRole role_of(ModalityId m) {
  return (m == ModalityId::Image || m == ModalityId::Text) ? ModalityRole::Teacher
                                                           : ModalityRole::Student;
}
constexpr std::size_t index_of(ModalityId m) { return static_cast<std::size_t>(m); }
std::string_view modality_name(ModalityId m);
// Throws ConfigError for unknown names.
ModalityId parse_modality(std::string_view name);

// Prompt with exactly one "{label}" placeholder.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text = "a photo of a {label}");
  static PromptTemplate identity() { return PromptTemplate("{label}"); }
  const std::string& text() const { return text_; }
  std::string render(std::string_view label) const;
  bool is_identity() const { return text_ == "{label}"; }

 private:
  std::string text_;
};

struct WorldParams {
  std::uint64_t seed = 7;
  std::size_t num_classes = 16;
  std::size_t dim = 32;
  std::array<std::size_t, kNumModalities> feature_dims = {48, 48, 48, 40, 36, 32, 40};
  std::array<double, kNumModalities> sigma = {0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05};
  double max_anchor_cosine = 0.5;
  // Norm of the template perturbation added to a class anchor.
  double template_scale = 0.1;
};

// Surface label -> canonical class id.
class SynonymTable {
 public:
  void add(std::string surface, std::size_t canonical);
  std::optional<std::size_t> resolve(std::string_view surface) const;
  const std::map<std::string, std::size_t, std::less<>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, std::size_t, std::less<>> entries_;
};

// Seeded stand-in for pretrained backbones and real datasets: class anchors in a
// d-dimensional space plus, per modality, a fixed generator (latent -> raw
// features). Teacher generators have orthonormal columns so the frozen teacher
// encoders invert them exactly. Student raw features additionally pass through a
// frozen feature extractor before a learnable head.
class SemanticWorld {
 public:
  static SemanticWorld generate(const WorldParams& params);

  const WorldParams& params() const { return params_; }
  std::size_t num_classes() const { return params_.num_classes; }
  std::size_t dim() const { return params_.dim; }
  std::size_t feature_dim(ModalityId m) const { return params_.feature_dims[index_of(m)]; }
  const Tensor& anchors() const { return anchors_; }
  const Tensor& generator(ModalityId m) const { return generators_[index_of(m)]; }
  // Frozen student feature extractor (feature_dim x feature_dim); empty for teachers.
  const Tensor& extractor(ModalityId m) const { return extractors_[index_of(m)]; }
  const SynonymTable& synonyms() const { return synonyms_; }
  const std::string& class_name(std::size_t c) const { return class_names_.at(c); }
  // All surface forms that resolve to class c, canonical name first.
  const std::vector<std::string>& surface_forms(std::size_t c) const { return surface_forms_.at(c); }

  // Latent semantic vector for one sample: anchor(c) + sigma * N(0, I/d).
  Tensor sample_latent(std::size_t class_id, double sigma, Rng& rng) const;
  // Raw feature row for a latent (1 x d) -> (1 x feature_dim).
  Tensor raw_from_latent(ModalityId m, const Tensor& latent) const;
  Tensor sample_raw(ModalityId m, std::size_t class_id, Rng& rng) const;

  // Persists manifest (world.json) plus OBT1 tensors into dir.
  void save(const std::filesystem::path& dir) const;
  static SemanticWorld load(const std::filesystem::path& dir);
  std::uint64_t fingerprint() const;

 private:
  WorldParams params_;
  Tensor anchors_;
  std::array<Tensor, kNumModalities> generators_;
  std::array<Tensor, kNumModalities> extractors_;
  std::vector<std::string> class_names_;
  std::vector<std::vector<std::string>> surface_forms_;
  SynonymTable synonyms_;
};

// Label embeddings E_s / E_pos / E_neg: normalize(anchor(c) + template offset).
Tensor encode_teacher_text(const SemanticWorld& world, std::span<const std::size_t> labels,
                           const PromptTemplate& prompt = PromptTemplate());
// All C label embeddings in class order.
Tensor label_embeddings(const SemanticWorld& world, const PromptTemplate& prompt = PromptTemplate());

// Frozen teacher encoders for image or text samples (raw rows -> unit rows).
Tensor encode_teacher(const SemanticWorld& world, ModalityId m, const Tensor& raw);
inline Tensor encode_teacher_image(const SemanticWorld& world, const Tensor& raw) {
  return encode_teacher(world, ModalityId::Image, raw);
}

struct HeadConfig {
  // 0 means 2 * embedding dim.
  std::size_t hidden = 0;
};

// Learnable two-layer MLP: feature_dim -> hidden (GELU) -> d.
class StudentHead {
 public:
  StudentHead() = default;
  StudentHead(ModalityId modality, std::size_t feature_dim, std::size_t hidden, std::size_t out_dim,
              Rng& rng);
  // W1 = W2 = I with a +shift/-shift bias pair that keeps GELU in its linear
  // regime; requires feature_dim == hidden == out_dim.
  static StudentHead identity(ModalityId modality, std::size_t dim, double shift = 16.0);

  ModalityId modality() const { return modality_; }
  std::size_t feature_dim() const { return w1_.value.rows(); }
  std::size_t out_dim() const { return w2_.value.cols(); }
  Var forward(Tape& tape, const Var& features) const;
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  ModalityId modality_ = ModalityId::Audio;
  Parameter w1_, b1_, w2_, b2_;
};

// Output of the frozen extractor for student raw rows (no gradient path).
Tensor student_features(const SemanticWorld& world, ModalityId m, const Tensor& raw);

// Frozen extractor -> head -> L2 normalization, differentiable in head params.
Var encode_student(Tape& tape, const SemanticWorld& world, const Tensor& raw, ModalityId m,
                   const StudentHead& head);
// Convenience: value-only student encoding.
Tensor encode_student(const SemanticWorld& world, const Tensor& raw, ModalityId m,
                      const StudentHead& head);

// Encoder registry for every modality: teachers are fixed, students use heads.
struct Encoders {
  const SemanticWorld* world = nullptr;
  std::map<ModalityId, StudentHead> heads;

  Tensor encode(ModalityId m, const Tensor& raw) const;
};

}  // namespace omnibind
