#include "omnibind/world.hpp"

#include <cmath>

#include <json.hpp>

#include "omnibind/error.hpp"
#include "omnibind/serialize.hpp"

namespace omnibind {

namespace {

constexpr std::array<std::string_view, kNumModalities> kModalityNames = {
    "image", "text", "audio", "point_cloud", "event", "touch", "thermal"};

struct Vocabulary {
  std::string_view canonical;
  std::array<std::string_view, 2> synonyms;
};

// Canonical class names with the alternative surface forms different source
// datasets use for them.
constexpr Vocabulary kVocabulary[] = {
    {"dog", {"canine", "puppy"}},          {"cat", {"feline", "kitten"}},
    {"car", {"automobile", "sedan"}},      {"bird", {"songbird", "avian"}},
    {"airplane", {"aeroplane", "jet"}},    {"guitar", {"acoustic_guitar", "electric_guitar"}},
    {"chair", {"seat", "armchair"}},       {"tree", {"oak", "woodland_tree"}},
    {"bicycle", {"bike", "cycle"}},        {"person", {"pedestrian", "human"}},
    {"rock", {"stone", "boulder"}},        {"fabric", {"cloth", "textile"}},
    {"metal", {"steel", "iron"}},          {"grass", {"lawn", "turf"}},
    {"wood", {"timber", "plank"}},         {"water", {"river", "stream"}},
    {"piano", {"keyboard", "grand_piano"}}, {"motorcycle", {"motorbike", "scooter"}},
    {"horse", {"pony", "stallion"}},       {"boat", {"ship", "vessel"}},
    {"lamp", {"lantern", "light"}},        {"table", {"desk", "bench"}},
    {"brick", {"masonry", "clay_brick"}},  {"leaf", {"foliage", "leaves"}},
    {"train", {"locomotive", "railcar"}},  {"drum", {"snare", "tom"}},
    {"cup", {"mug", "teacup"}},            {"bottle", {"flask", "jar"}},
    {"plastic", {"polymer", "vinyl"}},     {"paper", {"cardboard", "sheet"}},
    {"glass", {"pane", "window_glass"}},   {"sand", {"beach", "dune"}},
};
constexpr std::size_t kVocabularySize = sizeof(kVocabulary) / sizeof(kVocabulary[0]);

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// d x f matrix with orthonormal rows.
Tensor orthonormal_rows(Rng& rng, std::size_t d, std::size_t f) {
  Tensor g = gaussian(rng, d, f, 1.0);
  for (std::size_t i = 0; i < d; ++i) {
    auto ri = g.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const double proj = dot(ri, g.row(k));
      auto rk = g.row(k);
      for (std::size_t j = 0; j < f; ++j) ri[j] -= proj * rk[j];
    }
    const double n = norm(ri);
    for (double& v : ri) v /= n;
  }
  return g;
}

Tensor template_offset(const SemanticWorld& world, const PromptTemplate& prompt) {
  Tensor offset(1, world.dim());
  if (prompt.is_identity()) return offset;
  Rng rng(mix_seed(world.params().seed, fnv1a(prompt.text())));
  for (double& v : offset.values()) v = rng.normal();
  const double n = norm(offset.values());
  for (double& v : offset.values()) v *= world.params().template_scale / n;
  return offset;
}

std::string tensor_file(std::string_view kind, ModalityId m) {
  return std::string(kind) + "_" + std::string(modality_name(m)) + ".obt";
}

}  // namespace

std::string_view modality_name(ModalityId m) { return kModalityNames[index_of(m)]; }

ModalityId parse_modality(std::string_view name) {
  for (ModalityId m : kAllModalities) {
    if (modality_name(m) == name) return m;
  }
  throw ConfigError("unknown modality '" + std::string(name) + "'");
}

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  const auto first = text_.find("{label}");
  if (first == std::string::npos || text_.find("{label}", first + 1) != std::string::npos) {
    throw ConfigError("prompt template must contain exactly one {label} placeholder: " + text_);
  }
}

std::string PromptTemplate::render(std::string_view label) const {
  std::string out = text_;
  out.replace(out.find("{label}"), 7, label);
  return out;
}

void SynonymTable::add(std::string surface, std::size_t canonical) {
  const auto [it, inserted] = entries_.emplace(std::move(surface), canonical);
  if (!inserted && it->second != canonical) {
    throw ConfigError("surface label '" + it->first + "' maps to two canonical classes");
  }
}

std::optional<std::size_t> SynonymTable::resolve(std::string_view surface) const {
  const auto it = entries_.find(surface);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

SemanticWorld SemanticWorld::generate(const WorldParams& params) {
  if (params.num_classes < 2) throw ConfigError("world needs at least 2 classes");
  if (params.dim < 2) throw ConfigError("world embedding dim must be >= 2");
  for (ModalityId m : kAllModalities) {
    if (params.feature_dims[index_of(m)] < params.dim) {
      throw ConfigError("feature dim of " + std::string(modality_name(m)) +
                        " must be >= embedding dim");
    }
    if (params.sigma[index_of(m)] < 0.0) throw ConfigError("sigma must be non-negative");
  }

  SemanticWorld world;
  world.params_ = params;
  Rng rng(mix_seed(params.seed, 0x5eed));

  world.anchors_ = Tensor(params.num_classes, params.dim);
  std::size_t accepted = 0;
  for (std::size_t attempt = 0; accepted < params.num_classes; ++attempt) {
    if (attempt > 100000) throw ConfigError("cannot place anchors with the requested separation");
    Tensor candidate = l2_normalize_rows(gaussian(rng, 1, params.dim, 1.0));
    bool ok = true;
    for (std::size_t k = 0; k < accepted && ok; ++k) {
      ok = dot(candidate.row(0), world.anchors_.row(k)) <= params.max_anchor_cosine;
    }
    if (!ok) continue;
    std::copy(candidate.values().begin(), candidate.values().end(),
              world.anchors_.row(accepted).begin());
    ++accepted;
  }

  for (ModalityId m : kAllModalities) {
    const std::size_t f = params.feature_dims[index_of(m)];
    if (role_of(m) == ModalityRole::Teacher) {
      world.generators_[index_of(m)] = orthonormal_rows(rng, params.dim, f);
    } else {
      world.generators_[index_of(m)] =
          gaussian(rng, params.dim, f, 1.0 / std::sqrt(static_cast<double>(params.dim)));
      world.extractors_[index_of(m)] =
          gaussian(rng, f, f, 1.0 / std::sqrt(static_cast<double>(f)));
    }
  }

  for (std::size_t c = 0; c < params.num_classes; ++c) {
    std::vector<std::string> forms;
    if (c < kVocabularySize) {
      forms.emplace_back(kVocabulary[c].canonical);
      for (auto s : kVocabulary[c].synonyms) forms.emplace_back(s);
    } else {
      forms.push_back("class_" + std::to_string(c));
      forms.push_back("category_" + std::to_string(c));
    }
    for (const auto& s : forms) world.synonyms_.add(s, c);
    world.class_names_.push_back(forms.front());
    world.surface_forms_.push_back(std::move(forms));
  }
  return world;
}

Tensor SemanticWorld::sample_latent(std::size_t class_id, double sigma, Rng& rng) const {
  if (class_id >= num_classes()) throw ValidationError("unknown class id " + std::to_string(class_id));
  Tensor z = anchors_.row_copy(class_id);
  const double s = sigma / std::sqrt(static_cast<double>(dim()));
  for (double& v : z.values()) v += s * rng.normal();
  return z;
}

Tensor SemanticWorld::raw_from_latent(ModalityId m, const Tensor& latent) const {
  return matmul(latent, generators_[index_of(m)]);
}

Tensor SemanticWorld::sample_raw(ModalityId m, std::size_t class_id, Rng& rng) const {
  return raw_from_latent(m, sample_latent(class_id, params_.sigma[index_of(m)], rng));
}

void SemanticWorld::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["format"] = "omnibind-world-1";
  j["seed"] = params_.seed;
  j["num_classes"] = params_.num_classes;
  j["dim"] = params_.dim;
  j["max_anchor_cosine"] = params_.max_anchor_cosine;
  j["template_scale"] = params_.template_scale;
  for (ModalityId m : kAllModalities) {
    const std::string name(modality_name(m));
    j["feature_dims"][name] = params_.feature_dims[index_of(m)];
    j["sigma"][name] = params_.sigma[index_of(m)];
  }
  j["class_names"] = class_names_;
  for (const auto& [surface, id] : synonyms_.entries()) j["synonyms"][surface] = id;
  j["files"]["anchors"] = "anchors.obt";
  write_tensor(dir / "anchors.obt", anchors_);
  for (ModalityId m : kAllModalities) {
    const std::string name(modality_name(m));
    j["files"]["generator_" + name] = tensor_file("generator", m);
    write_tensor(dir / tensor_file("generator", m), generators_[index_of(m)]);
    if (role_of(m) == ModalityRole::Student) {
      j["files"]["extractor_" + name] = tensor_file("extractor", m);
      write_tensor(dir / tensor_file("extractor", m), extractors_[index_of(m)]);
    }
  }
  write_text(dir / "world.json", j.dump(2) + "\n");
}

SemanticWorld SemanticWorld::load(const std::filesystem::path& dir) {
  const auto manifest = dir / "world.json";
  if (!std::filesystem::exists(manifest)) {
    throw MissingArtifactError("world manifest not found: " + manifest.string() +
                                   " (run gen-world first)",
                               manifest.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  SemanticWorld world;
  WorldParams& p = world.params_;
  try {
    p.seed = j.at("seed").get<std::uint64_t>();
    p.num_classes = j.at("num_classes").get<std::size_t>();
    p.dim = j.at("dim").get<std::size_t>();
    p.max_anchor_cosine = j.at("max_anchor_cosine").get<double>();
    p.template_scale = j.at("template_scale").get<double>();
    for (ModalityId m : kAllModalities) {
      const std::string name(modality_name(m));
      p.feature_dims[index_of(m)] = j.at("feature_dims").at(name).get<std::size_t>();
      p.sigma[index_of(m)] = j.at("sigma").at(name).get<double>();
    }
    world.class_names_ = j.at("class_names").get<std::vector<std::string>>();
    world.surface_forms_.resize(p.num_classes);
    for (std::size_t c = 0; c < p.num_classes; ++c) world.surface_forms_[c].push_back(world.class_names_.at(c));
    for (const auto& [surface, id] : j.at("synonyms").items()) {
      const auto c = id.get<std::size_t>();
      world.synonyms_.add(surface, c);
      if (surface != world.class_names_.at(c)) world.surface_forms_.at(c).push_back(surface);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }

  world.anchors_ = l2_normalize_rows(read_tensor(dir / "anchors.obt"));
  if (world.anchors_.rows() != p.num_classes || world.anchors_.cols() != p.dim) {
    throw IoError("anchors.obt shape does not match world manifest");
  }
  for (ModalityId m : kAllModalities) {
    world.generators_[index_of(m)] = read_tensor(dir / tensor_file("generator", m));
    if (role_of(m) == ModalityRole::Student) {
      world.extractors_[index_of(m)] = read_tensor(dir / tensor_file("extractor", m));
    }
  }
  return world;
}

std::uint64_t SemanticWorld::fingerprint() const {
  std::uint64_t h = fnv1a("omnibind-world");
  auto feed = [&h](const Tensor& t) {
    const auto bytes = encode_tensor(t);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), h);
  };
  feed(anchors_);
  for (const auto& g : generators_) feed(g);
  for (const auto& e : extractors_) feed(e);
  for (const auto& [surface, id] : synonyms_.entries()) h = fnv1a(surface + "=" + std::to_string(id), h);
  return h;
}

Tensor encode_teacher_text(const SemanticWorld& world, std::span<const std::size_t> labels,
                           const PromptTemplate& prompt) {
  const Tensor offset = template_offset(world, prompt);
  Tensor out(labels.size(), world.dim());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= world.num_classes()) {
      throw ValidationError("encode_teacher_text: unknown class id " + std::to_string(labels[i]));
    }
    auto dst = out.row(i);
    auto anchor = world.anchors().row(labels[i]);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = anchor[j] + offset[j];
  }
  return l2_normalize_rows(out);
}

Tensor label_embeddings(const SemanticWorld& world, const PromptTemplate& prompt) {
  std::vector<std::size_t> all(world.num_classes());
  for (std::size_t c = 0; c < all.size(); ++c) all[c] = c;
  return encode_teacher_text(world, all, prompt);
}

Tensor encode_teacher(const SemanticWorld& world, ModalityId m, const Tensor& raw) {
  if (role_of(m) != ModalityRole::Teacher) {
    throw ValidationError("encode_teacher: " + std::string(modality_name(m)) + " is a student modality");
  }
  if (raw.cols() != world.feature_dim(m)) {
    throw DimensionError("encode_teacher: " + std::string(modality_name(m)) + " expects " +
                         std::to_string(world.feature_dim(m)) + " features, got " + raw.shape_string());
  }
  return l2_normalize_rows(matmul_nt(raw, world.generator(m)));
}

StudentHead::StudentHead(ModalityId modality, std::size_t feature_dim, std::size_t hidden,
                         std::size_t out_dim, Rng& rng)
    : modality_(modality) {
  const std::string prefix(modality_name(modality));
  auto uniform = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(rows, cols);
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  };
  w1_ = {prefix + ".w1", uniform(feature_dim, hidden, feature_dim)};
  b1_ = {prefix + ".b1", uniform(1, hidden, feature_dim)};
  w2_ = {prefix + ".w2", uniform(hidden, out_dim, hidden)};
  b2_ = {prefix + ".b2", uniform(1, out_dim, hidden)};
}

StudentHead StudentHead::identity(ModalityId modality, std::size_t dim, double shift) {
  StudentHead head;
  head.modality_ = modality;
  const std::string prefix(modality_name(modality));
  head.w1_ = {prefix + ".w1", Tensor::identity(dim)};
  head.b1_ = {prefix + ".b1", Tensor(1, dim, shift)};
  head.w2_ = {prefix + ".w2", Tensor::identity(dim)};
  head.b2_ = {prefix + ".b2", Tensor(1, dim, -shift)};
  return head;
}

Var StudentHead::forward(Tape& tape, const Var& features) const {
  if (features.cols() != feature_dim()) {
    throw DimensionError("student head for " + std::string(modality_name(modality_)) + " expects " +
                         std::to_string(feature_dim()) + " features, got " +
                         features.value().shape_string());
  }
  const Var hidden = gelu(add_row(matmul(features, tape.param(w1_)), tape.param(b1_)));
  return add_row(matmul(hidden, tape.param(w2_)), tape.param(b2_));
}

std::vector<Parameter*> StudentHead::parameters() { return {&w1_, &b1_, &w2_, &b2_}; }
std::vector<const Parameter*> StudentHead::parameters() const { return {&w1_, &b1_, &w2_, &b2_}; }

Tensor student_features(const SemanticWorld& world, ModalityId m, const Tensor& raw) {
  if (role_of(m) != ModalityRole::Student) {
    throw ValidationError("encode_student: " + std::string(modality_name(m)) +
                          " is a teacher modality");
  }
  if (raw.cols() != world.feature_dim(m)) {
    throw DimensionError("encode_student: " + std::string(modality_name(m)) + " expects " +
                         std::to_string(world.feature_dim(m)) + " features, got " + raw.shape_string());
  }
  return matmul(raw, world.extractor(m));
}

Var encode_student(Tape& tape, const SemanticWorld& world, const Tensor& raw, ModalityId m,
                   const StudentHead& head) {
  if (head.modality() != m) throw ValidationError("student head belongs to another modality");
  const Var features = tape.constant(student_features(world, m, raw));
  return l2_normalize_rows(head.forward(tape, features));
}

Tensor encode_student(const SemanticWorld& world, const Tensor& raw, ModalityId m,
                      const StudentHead& head) {
  Tape tape;
  return encode_student(tape, world, raw, m, head).value();
}

Tensor Encoders::encode(ModalityId m, const Tensor& raw) const {
  if (world == nullptr) throw ValidationError("Encoders: no world bound");
  if (role_of(m) == ModalityRole::Teacher) return encode_teacher(*world, m, raw);
  const auto it = heads.find(m);
  if (it == heads.end()) {
    throw ValidationError("no encoder for modality " + std::string(modality_name(m)));
  }
  return encode_student(*world, raw, m, it->second);
}

}  // namespace omnibind
