#include "omnibind/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "omnibind/error.hpp"
#include "omnibind/serialize.hpp"

namespace omnibind {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Walks one JSON object, consuming known keys; anything left over is an
// unknown field.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config field " + display() + ": expected an object");
  }

  template <typename T>
  ObjectReader& opt(const std::string& key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return *this;
    seen_.insert(key);
    read(*it, child(key), out);
    return *this;
  }

  template <typename Fn>
  ObjectReader& sub(const std::string& key, Fn fn) {
    const auto it = j_.find(key);
    if (it == j_.end()) return *this;
    seen_.insert(key);
    ObjectReader r(*it, child(key));
    fn(r);
    r.finish();
    return *this;
  }

  const json* take(const std::string& key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config field " + child(key));
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  static void read(const json& v, const std::string& path, double& out) {
    if (!v.is_number()) throw ConfigError("config field " + path + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& path, std::size_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError("config field " + path + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void read(const json& v, const std::string& path, bool& out) {
    if (!v.is_boolean()) throw ConfigError("config field " + path + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& path, std::string& out) {
    if (!v.is_string()) throw ConfigError("config field " + path + ": expected a string");
    out = v.get<std::string>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string norm_name(CorrespondenceNorm n) { return n == CorrespondenceNorm::Softmax ? "softmax" : "shifted_cosine"; }

CorrespondenceNorm parse_norm(const std::string& s, const std::string& path) {
  if (s == "softmax") return CorrespondenceNorm::Softmax;
  if (s == "shifted_cosine") return CorrespondenceNorm::ShiftedCosine;
  throw ConfigError("config field " + path + ": expected softmax or shifted_cosine");
}

template <typename T, typename Fn>
ordered_json per_modality_json(const std::array<T, kNumModalities>& values, Fn convert) {
  ordered_json j = ordered_json::object();
  for (ModalityId m : kAllModalities) j[std::string(modality_name(m))] = convert(values[index_of(m)]);
  return j;
}

template <typename T>
void read_per_modality(ObjectReader& r, std::array<T, kNumModalities>& values) {
  for (ModalityId m : kAllModalities) r.opt(std::string(modality_name(m)), values[index_of(m)]);
}

ordered_json config_json(const RunConfig& c, bool with_out) {
  ordered_json j;
  j["seed"] = c.seed;
  if (with_out) j["out"] = c.out.string();
  auto& w = j["world"];
  w["classes"] = c.world.num_classes;
  w["dim"] = c.world.dim;
  w["feature_dims"] = per_modality_json(c.world.feature_dims, [](std::size_t v) { return v; });
  w["sigma"] = per_modality_json(c.world.sigma, [](double v) { return v; });
  w["max_anchor_cosine"] = c.world.max_anchor_cosine;
  w["template_scale"] = c.world.template_scale;
  auto& s1 = j["stage1"];
  s1["tau"] = c.stage1.temperature;
  s1["lambda_cr"] = c.stage1.lambda_cr;
  s1["lambda_se"] = c.stage1.lambda_se;
  s1["divisor"] = c.stage1.divisor;
  s1["norm"] = norm_name(c.stage1.norm);
  s1["epochs"] = c.stage1.epochs;
  s1["warmup_steps"] = c.stage1.warmup_steps;
  s1["weight_decay"] = c.stage1.weight_decay;
  s1["max_grad_norm"] = c.stage1.max_grad_norm;
  s1["hidden"] = c.stage1.hidden;
  s1["teacher_per_class"] = c.stage1.teacher_per_class;
  s1["student_per_class"] = c.stage1.student_per_class;
  s1["val_per_class"] = c.stage1.val_per_class;
  s1["heldout_per_class"] = c.stage1.heldout_per_class;
  for (ModalityId m : kStudentModalities) {
    const auto& sch = c.stage1.schedules[index_of(m)];
    s1["schedules"][std::string(modality_name(m))] = {{"batch_size", sch.batch_size}, {"lr", sch.lr}};
  }
  auto& s2 = j["stage2"];
  s2["tau"] = c.stage2.temperature;
  s2["epochs"] = c.stage2.epochs;
  s2["batch_size"] = c.stage2.batch_size;
  s2["lr"] = c.stage2.lr;
  s2["weight_decay"] = c.stage2.weight_decay;
  s2["warmup_steps"] = c.stage2.warmup_steps;
  s2["max_grad_norm"] = c.stage2.max_grad_norm;
  s2["negatives"] = negative_mode_name(c.stage2.negatives);
  s2["ablation_negatives"] = negative_mode_name(c.ablation_negatives);
  s2["noise_prob"] = c.stage2.noise_prob;
  s2["noise_magnitude"] = c.stage2.noise_magnitude;
  s2["heads"] = c.stage2.heads;
  s2["residual"] = c.stage2.residual;
  s2["dev_fraction"] = c.stage2.dev_fraction;
  auto& d = j["dataset"];
  d["records_per_class"] = per_modality_json(c.dataset.records_per_class, [](std::size_t v) { return v; });
  d["record_sigma"] = per_modality_json(c.dataset.record_sigma, [](double v) { return v; });
  d["description_sigma"] = c.dataset.description_sigma;
  d["unknown_label_rate"] = c.dataset.unknown_label_rate;
  ordered_json props = ordered_json::array();
  for (double p : c.dataset.proportions) props.push_back(p * 100.0);
  d["proportions"] = props;
  d["train_total"] = c.dataset.train_total;
  d["eval_total"] = c.dataset.eval_total;
  d["robustness_per_combination"] = c.robustness_per_combination;
  j["eval"]["noise_magnitude"] = c.eval_noise_magnitude;
  return j;
}

// Seeds of the individual stages, all derived from RunConfig::seed.
std::uint64_t stage_seed(const RunConfig& c, std::uint64_t stream) { return mix_seed(c.seed, stream); }
constexpr std::uint64_t kStage1Stream = 11;
constexpr std::uint64_t kTrainDataStream = 21;
constexpr std::uint64_t kEvalDataStream = 22;
constexpr std::uint64_t kRobustnessStream = 23;
constexpr std::uint64_t kFusionInitStream = 31;
constexpr std::uint64_t kFusionTrainStream = 32;
constexpr std::uint64_t kEvalNoiseStream = 41;

WorldParams world_params(const RunConfig& c) {
  WorldParams p = c.world;
  p.seed = c.seed;
  return p;
}

void require(const std::filesystem::path& path, const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    throw MissingArtifactError("missing " + path.string() + " (run " + producer + " first)", path.string());
  }
}

void write_stamp(const std::filesystem::path& dir, const std::string& stage, const RunConfig& cfg,
                 ordered_json extra = ordered_json::object()) {
  ordered_json j;
  j["stage"] = stage;
  j["seed"] = cfg.seed;
  j["config_hash"] = cfg.hash();
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_text(dir / (stage + ".json"), j.dump(2) + "\n");
}

// Warns when an input artifact came from a different configuration.
void check_stamp(const std::filesystem::path& stamp, const RunConfig& cfg) {
  if (!std::filesystem::exists(stamp)) return;
  try {
    const json j = json::parse(read_text(stamp));
    const std::string hash = j.value("config_hash", std::string());
    if (hash != cfg.hash()) {
      std::cerr << "warning: " << stamp.string() << " was produced with config " << hash << ", current config is "
                << cfg.hash() << "\n";
    }
  } catch (const json::exception&) {
    throw IoError(stamp.string() + ": not valid JSON");
  }
}

class StageLog {
 public:
  StageLog(const RunConfig& cfg, std::string stage)
      : path_(RunPaths{cfg.out}.log()), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageLog() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::localtime(&now));
    char secs_text[32];
    std::snprintf(secs_text, sizeof secs_text, "%.2f", secs);
    out << stamp << ' ' << stage_ << ' ' << secs_text << "s\n";
  }

 private:
  std::filesystem::path path_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

SemanticWorld load_world(const RunPaths& paths, const RunConfig& cfg) {
  require(paths.world() / "world.json", "gen-world");
  check_stamp(paths.world() / "gen-world.json", cfg);
  return SemanticWorld::load(paths.world());
}

struct LoadedData {
  RecordStore store;
  DatasetManifest manifest;
};

LoadedData load_data(const std::filesystem::path& dir, const std::string& manifest_name) {
  require(dir / "records.tsv", "build-data");
  require(dir / manifest_name, "build-data");
  return {RecordStore::load(dir), DatasetManifest::parse(read_text(dir / manifest_name))};
}

Encoders load_encoders(const RunPaths& paths, const RunConfig& cfg, const SemanticWorld& world) {
  require(paths.stage1() / "stage1.json", "train-stage1");
  check_stamp(paths.stage1() / "stage1.json", cfg);
  return Encoders{&world, load_stage1(paths.stage1(), world)};
}

std::vector<std::vector<ModalityId>> all_combinations() {
  std::vector<std::vector<ModalityId>> out;
  for (std::size_t n = 2; n <= 5; ++n) {
    for (unsigned mask = 1; mask < (1u << kNumModalities); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != n) continue;
      std::vector<ModalityId> combo;
      for (std::size_t i = 0; i < kNumModalities; ++i) {
        if (mask >> i & 1u) combo.push_back(kAllModalities[i]);
      }
      out.push_back(std::move(combo));
    }
  }
  return out;
}

}  // namespace

std::string negative_mode_name(NegativeMode mode) {
  switch (mode) {
    case NegativeMode::Predicted: return "predicted";
    case NegativeMode::Random: return "random";
    case NegativeMode::All: return "all";
    case NegativeMode::AllPredicted: return "all+predicted";
  }
  return "predicted";
}

NegativeMode parse_negative_mode(const std::string& name) {
  for (NegativeMode m : {NegativeMode::Predicted, NegativeMode::Random, NegativeMode::All, NegativeMode::AllPredicted}) {
    if (negative_mode_name(m) == name) return m;
  }
  throw ConfigError("unknown negative mode '" + name + "' (predicted, random, all, all+predicted)");
}

std::string RunConfig::to_json() const { return config_json(*this, true).dump(2) + "\n"; }

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_json(*this, false).dump())));
  return buf;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": malformed JSON: " + e.what());
  }
  RunConfig c;
  std::string out = c.out.string();
  ObjectReader root(j, "");
  root.opt("seed", c.seed).opt("out", out);
  root.sub("world", [&](ObjectReader& r) {
    r.opt("classes", c.world.num_classes).opt("dim", c.world.dim);
    r.opt("max_anchor_cosine", c.world.max_anchor_cosine).opt("template_scale", c.world.template_scale);
    r.sub("feature_dims", [&](ObjectReader& f) { read_per_modality(f, c.world.feature_dims); });
    r.sub("sigma", [&](ObjectReader& f) { read_per_modality(f, c.world.sigma); });
  });
  root.sub("stage1", [&](ObjectReader& r) {
    std::string norm = norm_name(c.stage1.norm);
    r.opt("tau", c.stage1.temperature).opt("lambda_cr", c.stage1.lambda_cr).opt("lambda_se", c.stage1.lambda_se);
    r.opt("divisor", c.stage1.divisor).opt("norm", norm).opt("epochs", c.stage1.epochs);
    r.opt("warmup_steps", c.stage1.warmup_steps).opt("weight_decay", c.stage1.weight_decay);
    r.opt("max_grad_norm", c.stage1.max_grad_norm).opt("hidden", c.stage1.hidden);
    r.opt("teacher_per_class", c.stage1.teacher_per_class).opt("student_per_class", c.stage1.student_per_class);
    r.opt("val_per_class", c.stage1.val_per_class).opt("heldout_per_class", c.stage1.heldout_per_class);
    r.sub("schedules", [&](ObjectReader& s) {
      for (ModalityId m : kStudentModalities) {
        auto& sch = c.stage1.schedules[index_of(m)];
        s.sub(std::string(modality_name(m)), [&](ObjectReader& e) { e.opt("batch_size", sch.batch_size).opt("lr", sch.lr); });
      }
    });
    c.stage1.norm = parse_norm(norm, r.child("norm"));
  });
  root.sub("stage2", [&](ObjectReader& r) {
    std::string neg = negative_mode_name(c.stage2.negatives);
    std::string ablation = negative_mode_name(c.ablation_negatives);
    r.opt("tau", c.stage2.temperature).opt("epochs", c.stage2.epochs).opt("batch_size", c.stage2.batch_size);
    r.opt("lr", c.stage2.lr).opt("weight_decay", c.stage2.weight_decay).opt("warmup_steps", c.stage2.warmup_steps);
    r.opt("max_grad_norm", c.stage2.max_grad_norm).opt("negatives", neg).opt("ablation_negatives", ablation);
    r.opt("noise_prob", c.stage2.noise_prob).opt("noise_magnitude", c.stage2.noise_magnitude);
    r.opt("heads", c.stage2.heads).opt("residual", c.stage2.residual).opt("dev_fraction", c.stage2.dev_fraction);
    try {
      c.stage2.negatives = parse_negative_mode(neg);
    } catch (const ConfigError& e) {
      throw ConfigError("config field " + r.child("negatives") + ": " + e.what());
    }
    try {
      c.ablation_negatives = parse_negative_mode(ablation);
    } catch (const ConfigError& e) {
      throw ConfigError("config field " + r.child("ablation_negatives") + ": " + e.what());
    }
  });
  root.sub("dataset", [&](ObjectReader& r) {
    r.sub("records_per_class", [&](ObjectReader& f) { read_per_modality(f, c.dataset.records_per_class); });
    r.sub("record_sigma", [&](ObjectReader& f) { read_per_modality(f, c.dataset.record_sigma); });
    r.opt("description_sigma", c.dataset.description_sigma).opt("unknown_label_rate", c.dataset.unknown_label_rate);
    r.opt("train_total", c.dataset.train_total).opt("eval_total", c.dataset.eval_total);
    r.opt("robustness_per_combination", c.robustness_per_combination);
    if (const json* props = r.take("proportions")) {
      const json& p = *props;
      const std::string path = r.child("proportions");
      if (!p.is_array() || p.size() != 4) throw ConfigError("config field " + path + ": expected 4 percentages");
      for (std::size_t i = 0; i < 4; ++i) {
        if (!p[i].is_number()) throw ConfigError("config field " + path + "[" + std::to_string(i) + "]: expected a number");
        c.dataset.proportions[i] = p[i].get<double>() / 100.0;
      }
    }
  });
  root.sub("eval", [&](ObjectReader& r) { r.opt("noise_magnitude", c.eval_noise_magnitude); });
  root.finish();
  c.out = out;
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(read_text(path), path.string());
}

void RunConfig::validate() const {
  if (world.num_classes < 2) throw ConfigError("config field world.classes: need at least 2 classes");
  if (world.dim == 0) throw ConfigError("config field world.dim: must be positive");
  for (ModalityId m : kAllModalities) {
    if (world.feature_dims[index_of(m)] < world.dim) {
      throw ConfigError("config field world.feature_dims." + std::string(modality_name(m)) + ": must be >= world.dim");
    }
  }
  if (world.dim % stage2.heads != 0) throw ConfigError("config field stage2.heads: must divide world.dim");
  stage1.validate();
  stage2.validate();
  dataset.validate();
  if (dataset.train_total < 100 || dataset.eval_total < 100) {
    throw ConfigError("config field dataset.train_total/eval_total: need at least 100 samples");
  }
  if (robustness_per_combination == 0) throw ConfigError("config field dataset.robustness_per_combination: must be positive");
  if (eval_noise_magnitude < 0.0 || eval_noise_magnitude > 1.0) {
    throw ConfigError("config field eval.noise_magnitude: must be in [0, 1]");
  }
}

void save_stage1(const Stage1Result& result, const std::filesystem::path& dir, std::uint64_t seed,
                 const std::string& config_hash) {
  std::filesystem::create_directories(dir / "heads");
  ordered_json j;
  j["stage"] = "stage1";
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  ordered_json order = ordered_json::array();
  for (ModalityId m : result.order) order.push_back(std::string(modality_name(m)));
  j["training_order"] = order;
  for (const auto& [m, head] : result.heads) {
    const std::string name(modality_name(m));
    ordered_json files = ordered_json::array();
    for (const Parameter* p : head.parameters()) {
      write_tensor(dir / "heads" / (p->name + ".obt"), p->value);
      files.push_back("heads/" + p->name + ".obt");
    }
    j["heads"][name]["files"] = files;
    j["heads"][name]["feature_dim"] = head.feature_dim();
    j["heads"][name]["hidden"] = head.parameters()[0]->value.cols();
    j["heads"][name]["out_dim"] = head.out_dim();
  }
  write_text(dir / "stage1.json", j.dump(2) + "\n");
}

std::map<ModalityId, StudentHead> load_stage1(const std::filesystem::path& dir, const SemanticWorld& world) {
  const auto manifest = dir / "stage1.json";
  require(manifest, "train-stage1");
  json j;
  try {
    j = json::parse(read_text(manifest));
  } catch (const json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  std::map<ModalityId, StudentHead> heads;
  for (ModalityId m : kStudentModalities) {
    const std::string name(modality_name(m));
    if (!j.contains("heads") || !j["heads"].contains(name)) {
      throw IoError(manifest.string() + ": no head for " + name);
    }
    const json& h = j["heads"][name];
    Rng unused(0);
    StudentHead head(m, h.at("feature_dim").get<std::size_t>(), h.at("hidden").get<std::size_t>(),
                     h.at("out_dim").get<std::size_t>(), unused);
    if (head.out_dim() != world.dim() || head.feature_dim() != world.feature_dim(m)) {
      throw IoError(manifest.string() + ": head " + name + " does not fit the world dimensions");
    }
    for (Parameter* p : head.parameters()) {
      const auto path = dir / "heads" / (p->name + ".obt");
      require(path, "train-stage1");
      Tensor t = read_tensor(path);
      if (!t.same_shape(p->value)) throw IoError(path.string() + ": unexpected shape " + t.shape_string());
      p->value = std::move(t);
    }
    heads.emplace(m, std::move(head));
  }
  return heads;
}

void run_gen_world(const RunConfig& cfg) {
  cfg.validate();
  StageLog log(cfg, "gen-world");
  const RunPaths paths{cfg.out};
  const SemanticWorld world = SemanticWorld::generate(world_params(cfg));
  world.save(paths.world());
  write_text(paths.root / "config.json", cfg.to_json());
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(world.fingerprint()));
  write_stamp(paths.world(), "gen-world", cfg, {{"fingerprint", fp}});
}

void run_build_data(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const SemanticWorld world = load_world(paths, cfg);
  StageLog log(cfg, "build-data");
  const BuiltDataset train = build_dataset(world, cfg.dataset, cfg.dataset.train_total, stage_seed(cfg, kTrainDataStream));
  const BuiltDataset eval = build_dataset(world, cfg.dataset, cfg.dataset.eval_total, stage_seed(cfg, kEvalDataStream));

  ManifestRequest robust;
  robust.only_combinations = all_combinations();
  robust.total = cfg.robustness_per_combination * robust.only_combinations.size();
  robust.seed = stage_seed(cfg, kRobustnessStream);
  const MatchIndex matches = MatchIndex::build(eval.store, eval.alignment);
  const DatasetManifest robustness = build_manifest(eval.store, eval.alignment, matches, robust);

  for (const auto& [dir, data] : {std::pair{paths.train_data(), &train}, std::pair{paths.eval_data(), &eval}}) {
    data->store.save(dir);
    write_text(dir / "manifest.txt", data->manifest.serialize());
  }
  write_text(paths.eval_data() / "robustness_manifest.txt", robustness.serialize());

  std::ostringstream report;
  report << "split,samples,hash,2M,3M,4M,5M,unknown_labels\n";
  auto row = [&](const char* name, const BuiltDataset& d) {
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(d.manifest.hash()));
    report << name << ',' << d.manifest.samples.size() << ',' << hash;
    for (std::size_t n = 2; n <= 5; ++n) report << ',' << fixed4(d.manifest.realized_proportion(n));
    report << ',' << d.alignment.rejected.size() << '\n';
  };
  row("train", train);
  row("eval", eval);
  write_text(paths.root / "data" / "dataset_report.csv", report.str());
  write_stamp(paths.root / "data", "build-data", cfg);
}

void run_train_stage1(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const SemanticWorld world = load_world(paths, cfg);
  StageLog log(cfg, "train-stage1");
  const Stage1Result result = train_stage1(world, cfg.stage1, stage_seed(cfg, kStage1Stream));
  save_stage1(result, paths.stage1(), cfg.seed, cfg.hash());

  std::ostringstream curve;
  curve << "epoch,step,modality,loss_in,loss_cr,loss_se,total\n";
  for (const auto& r : result.curve) {
    curve << r.epoch << ',' << r.step << ',' << modality_name(r.modality) << ',' << fixed6(r.in) << ','
          << fixed6(r.cr) << ',' << fixed6(r.se) << ',' << fixed6(r.total) << '\n';
  }
  write_text(paths.stage1() / "loss_curve.csv", curve.str());

  std::ostringstream align;
  align << "modality,initial_r1,final_r1,best_val_r1,best_epoch\n";
  for (ModalityId m : kStudentModalities) {
    const auto& a = result.alignment.at(m);
    align << modality_name(m) << ',' << fixed4(a.initial_r1) << ',' << fixed4(a.final_r1) << ','
          << fixed4(a.best_val_r1) << ',' << a.best_epoch << '\n';
  }
  write_text(paths.stage1() / "alignment.csv", align.str());
}

void run_train_stage2(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const SemanticWorld world = load_world(paths, cfg);
  const Encoders encoders = load_encoders(paths, cfg, world);
  const LoadedData train = load_data(paths.train_data(), "manifest.txt");
  StageLog log(cfg, "train-stage2");
  const Stage2Data data{&world, &encoders, &train.store, &train.manifest};

  const AfParams params{world.dim(), cfg.stage2.heads, cfg.stage2.residual};
  Rng init_rng(stage_seed(cfg, kFusionInitStream));
  const AdaptiveFusion af_init(params, init_rng);
  const LinearFusion linear_init(world.dim());
  const OuterProductFusion outer_init(world.dim());

  Stage2Config ablation = cfg.stage2;
  ablation.negatives = cfg.ablation_negatives;
  struct Job {
    const char* name;
    const FusionModel* init;
    const Stage2Config* cfg;
  };
  const std::vector<Job> jobs = {{kAfModel, &af_init, &cfg.stage2},
                                 {kAfNoNegModel, &af_init, &ablation},
                                 {kLinearModel, &linear_init, &cfg.stage2},
                                 {kOuterModel, &outer_init, &cfg.stage2}};
  const std::uint64_t train_seed = stage_seed(cfg, kFusionTrainStream);

  std::ostringstream curve;
  curve << "model,epoch,step,loss\n";
  ordered_json summary = ordered_json::object();
  for (const Job& job : jobs) {
    const Stage2Result r = train_stage2(data, *job.init, *job.cfg, train_seed);
    save_fusion(*r.model, paths.stage2() / job.name, cfg.seed, cfg.hash());
    for (const auto& row : r.curve) {
      curve << job.name << ',' << row.epoch << ',' << row.step << ',' << fixed6(row.loss) << '\n';
    }
    ordered_json dev = ordered_json::array();
    for (double a : r.dev_accuracy) dev.push_back(std::stod(fixed4(a)));
    summary[job.name] = {{"negatives", negative_mode_name(job.cfg->negatives)},
                         {"best_epoch", r.best_epoch},
                         {"dev_accuracy", dev}};
  }
  write_text(paths.stage2() / "loss_curve.csv", curve.str());
  write_stamp(paths.stage2(), "stage2", cfg, {{"models", summary}});
}

void run_eval(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const SemanticWorld world = load_world(paths, cfg);
  const Encoders encoders = load_encoders(paths, cfg, world);
  const LoadedData eval = load_data(paths.eval_data(), "manifest.txt");
  require(paths.eval_data() / "robustness_manifest.txt", "build-data");
  const DatasetManifest robustness = DatasetManifest::parse(read_text(paths.eval_data() / "robustness_manifest.txt"));
  require(paths.stage2() / "stage2.json", "train-stage2");
  check_stamp(paths.stage2() / "stage2.json", cfg);
  std::map<std::string, std::unique_ptr<FusionModel>> models;
  for (const char* name : {kAfModel, kAfNoNegModel, kLinearModel, kOuterModel}) {
    models[name] = load_fusion(paths.stage2() / name);
  }
  models[kMeanModel] = std::make_unique<AdaptiveFusion>(
      AdaptiveFusion::mean_baseline(AfParams{world.dim(), cfg.stage2.heads, cfg.stage2.residual}));
  StageLog log(cfg, "eval");

  const std::size_t threads = eval_threads();
  const EmbeddingCache cache(encoders, eval.store);
  const EvalContext ctx{&world, &encoders, &eval.store, &cache, label_embeddings(world)};
  const LabelAlignment alignment = align_labels(eval.store.records(), world.synonyms());
  const auto out = paths.eval();
  std::filesystem::create_directories(out / "tables");

  MetricsReport report;
  report.seed = cfg.seed;
  report.config_hash = cfg.hash();
  report.per_modality = per_modality_accuracy(ctx, alignment);
  write_text(out / "per_modality.csv", per_modality_csv(report.per_modality));

  std::vector<std::string> expected;
  for (const auto& combo : all_combinations()) expected.push_back(combination_key(combo));

  const std::vector<std::string> order = {kAfModel, kAfNoNegModel, kMeanModel, kLinearModel, kOuterModel};
  for (const std::string& name : order) {
    const auto outcomes = evaluate(eval.manifest, ctx, fusion_predictor(*models[name], ctx.labels), nullptr, threads);
    report.combination_accuracy[name] = summarize(outcomes, expected);
    write_text(out / ("accuracy_" + name + ".csv"), accuracy_csv(report.combination_accuracy[name]));
    if (name == kAfModel) write_text(out / "predictions_af.csv", predictions_csv(outcomes));
    report.fusion_baselines.push_back({name, report.combination_accuracy[name]});
  }
  write_text(out / "baselines.csv", baselines_csv(report.fusion_baselines));

  // Random-one-modality noise on the eval manifest; the 3-5 modality slice is
  // the with/without negative label comparison.
  const NoiseSpec noise{std::nullopt, cfg.eval_noise_magnitude, stage_seed(cfg, kEvalNoiseStream)};
  DatasetManifest multi;
  for (const auto& s : eval.manifest.samples) {
    if (s.size() >= 3) multi.samples.push_back(s);
  }
  std::ostringstream ablation;
  ablation << "model,samples,correct,accuracy\n";
  ordered_json ablation_json = ordered_json::object();
  for (const std::string& name : order) {
    const auto outcomes = evaluate(eval.manifest, ctx, fusion_predictor(*models[name], ctx.labels), &noise, threads);
    report.noisy_baselines.push_back({name, summarize(outcomes)});
    std::size_t correct = 0, n = 0;
    for (const auto& o : outcomes) {
      if (o.size < 3) continue;
      ++n;
      correct += o.correct() ? 1 : 0;
    }
    const double acc = n == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    ablation << name << ',' << n << ',' << correct << ',' << fixed4(acc) << '\n';
    ablation_json[name] = {{"samples", n}, {"correct", correct}, {"accuracy", std::stod(fixed4(acc))}};
  }
  write_text(out / "baselines_noisy.csv", baselines_csv(report.noisy_baselines));
  write_text(out / "noise_ablation.csv", ablation.str());

  report.robustness = eval_robustness(robustness, ctx, fusion_predictor(*models[kAfModel], ctx.labels),
                                      cfg.eval_noise_magnitude, stage_seed(cfg, kEvalNoiseStream), threads);
  report.dominance_violations = text_dominance_violations(report.robustness);
  write_text(out / "robustness.csv", robustness_csv(report.robustness));

  ordered_json summary = ordered_json::parse(summary_json(report));
  summary["noise_ablation_345m"] = ablation_json;
  write_text(out / "summary.json", summary.dump(2) + "\n");

  const std::vector<std::pair<TableKind, const char*>> tables = {{TableKind::TwoModal, "2m"},
                                                                 {TableKind::MultiModal, "345m"},
                                                                 {TableKind::Fusion, "fusion"},
                                                                 {TableKind::Robustness, "robustness"}};
  for (const auto& [kind, name] : tables) write_text(out / "tables" / (std::string(name) + ".txt"), render_table(report, kind));
}

std::string run_report(const RunConfig& cfg, TableKind kind) {
  const RunPaths paths{cfg.out};
  require(paths.eval() / "summary.json", "eval");
  static const std::map<TableKind, std::string> names = {{TableKind::TwoModal, "2m"},
                                                         {TableKind::MultiModal, "345m"},
                                                         {TableKind::Fusion, "fusion"},
                                                         {TableKind::Robustness, "robustness"}};
  const auto path = paths.eval() / "tables" / (names.at(kind) + ".txt");
  require(path, "eval");
  return read_text(path);
}

}  // namespace omnibind
