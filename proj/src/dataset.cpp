#include "omnibind/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "omnibind/error.hpp"
#include "omnibind/serialize.hpp"

namespace omnibind {

namespace {

struct Source {
  std::string_view name;
  ModalityId modality;
};

// Nine source corpora feeding seven modalities.
constexpr Source kSources[] = {
    {"img-objects", ModalityId::Image},   {"img-scenes", ModalityId::Image},
    {"txt-captions", ModalityId::Text},   {"aud-clips", ModalityId::Audio},
    {"aud-events", ModalityId::Audio},    {"pc-shapes", ModalityId::PointCloud},
    {"evt-neuromorphic", ModalityId::Event}, {"tch-surfaces", ModalityId::Touch},
    {"thm-infrared", ModalityId::Thermal},
};

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw IoError(std::string("manifest: malformed ") + what + " '" + s + "'");
  }
  return v;
}

void enumerate_subsets(std::size_t n, std::size_t start, std::vector<ModalityId>& cur,
                       std::vector<std::vector<ModalityId>>& out) {
  if (cur.size() == n) {
    out.push_back(cur);
    return;
  }
  for (std::size_t i = start; i < kNumModalities; ++i) {
    cur.push_back(kAllModalities[i]);
    enumerate_subsets(n, i + 1, cur, out);
    cur.pop_back();
  }
}

}  // namespace

void DatasetConfig::validate() const {
  double s = 0.0;
  for (double p : proportions) {
    if (p < 0.0) throw ConfigError("dataset.proportions must be non-negative");
    s += p;
  }
  if (s > 1.0 + 1e-9) throw ConfigError("dataset.proportions must sum to at most 1");
  if (unknown_label_rate < 0.0 || unknown_label_rate >= 1.0) {
    throw ConfigError("dataset.unknown_label_rate must be in [0, 1)");
  }
  for (std::size_t n : records_per_class) {
    if (n == 0) throw ConfigError("dataset.records_per_class must be positive");
  }
}

RecordStore::RecordStore(std::vector<SampleRecord> records) : records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].id != i) throw ValidationError("record ids must equal their positions");
  }
}

const SampleRecord& RecordStore::at(RecordId id) const {
  if (id >= records_.size()) throw ValidationError("unknown record id " + std::to_string(id));
  return records_[id];
}

std::vector<const SampleRecord*> RecordStore::of_modality(ModalityId m) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records_) {
    if (r.modality == m) out.push_back(&r);
  }
  return out;
}

void RecordStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream index;
  index << "id\tmodality\tsource\tsurface_label\n";
  for (const auto& r : records_) {
    index << r.id << '\t' << modality_name(r.modality) << '\t' << r.source << '\t' << r.surface_label
          << '\n';
  }
  write_text(dir / "records.tsv", index.str());
  for (ModalityId m : kAllModalities) {
    std::vector<Tensor> feats, descs;
    for (const SampleRecord* r : of_modality(m)) {
      feats.push_back(r->features);
      descs.push_back(r->description);
    }
    if (feats.empty()) continue;
    const std::string name(modality_name(m));
    write_tensor(dir / ("features_" + name + ".obt"), stack_rows(feats));
    write_tensor(dir / ("descriptions_" + name + ".obt"), stack_rows(descs));
  }
}

RecordStore RecordStore::load(const std::filesystem::path& dir) {
  const auto index_path = dir / "records.tsv";
  if (!std::filesystem::exists(index_path)) {
    throw MissingArtifactError("record index not found: " + index_path.string() +
                                   " (run build-data first)",
                               index_path.string());
  }
  std::istringstream in(read_text(index_path));
  std::string line;
  std::getline(in, line);
  std::vector<SampleRecord> records;
  std::map<ModalityId, std::vector<RecordId>> order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 4) throw IoError(index_path.string() + ": malformed line '" + line + "'");
    SampleRecord r;
    r.id = static_cast<RecordId>(parse_u64(cols[0], "record id"));
    r.modality = parse_modality(cols[1]);
    r.source = cols[2];
    r.surface_label = cols[3];
    order[r.modality].push_back(r.id);
    records.push_back(std::move(r));
  }
  for (const auto& [m, ids] : order) {
    const std::string name(modality_name(m));
    const Tensor feats = read_tensor(dir / ("features_" + name + ".obt"));
    const Tensor descs = read_tensor(dir / ("descriptions_" + name + ".obt"));
    if (feats.rows() != ids.size() || descs.rows() != ids.size()) {
      throw IoError("record tensors for " + name + " do not match records.tsv");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      records.at(ids[i]).features = feats.row_copy(i);
      records.at(ids[i]).description = descs.row_copy(i);
    }
  }
  return RecordStore(std::move(records));
}

RecordStore generate_records(const SemanticWorld& world, const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<SampleRecord> records;
  std::size_t unknown_counter = 0;
  const double desc_scale = cfg.description_sigma / std::sqrt(static_cast<double>(world.dim()));
  for (ModalityId m : kAllModalities) {
    std::vector<std::size_t> sources;
    for (std::size_t s = 0; s < std::size(kSources); ++s) {
      if (kSources[s].modality == m) sources.push_back(s);
    }
    for (std::size_t c = 0; c < world.num_classes(); ++c) {
      const auto& forms = world.surface_forms(c);
      for (std::size_t i = 0; i < cfg.records_per_class[index_of(m)]; ++i) {
        SampleRecord r;
        r.id = static_cast<RecordId>(records.size());
        r.modality = m;
        const std::size_t src = sources[i % sources.size()];
        r.source = std::string(kSources[src].name);
        // Each source prefers one surface form but is not consistent about it.
        const std::size_t form = rng.uniform() < 0.7 ? src % forms.size() : rng.below(forms.size());
        r.surface_label = forms[form];
        if (rng.uniform() < cfg.unknown_label_rate) {
          r.surface_label = "zorble_" + std::to_string(unknown_counter++);
        }
        const Tensor latent = world.sample_latent(c, cfg.record_sigma[index_of(m)], rng);
        r.features = world.raw_from_latent(m, latent);
        Tensor desc = latent;
        for (double& v : desc.values()) v += desc_scale * rng.normal();
        r.description = l2_normalize_rows(desc);
        records.push_back(std::move(r));
      }
    }
  }
  return RecordStore(std::move(records));
}

std::string LabelAlignment::rejection_report() const {
  std::ostringstream out;
  out << "# records rejected during label alignment: " << rejected.size() << "\n";
  for (const auto& [id, label] : rejected) out << id << "\t" << label << "\n";
  return out.str();
}

LabelAlignment align_labels(std::span<const SampleRecord> records, const SynonymTable& table) {
  LabelAlignment out;
  for (const auto& r : records) {
    if (const auto c = table.resolve(r.surface_label)) {
      out.canonical.emplace(r.id, *c);
    } else {
      out.rejected.emplace_back(r.id, r.surface_label);
    }
  }
  return out;
}

MatchResult match_samples(std::span<const SampleRecord* const> a, std::span<const SampleRecord* const> b,
                          const LabelAlignment& alignment) {
  std::map<std::size_t, std::pair<std::vector<const SampleRecord*>, std::vector<const SampleRecord*>>> by_label;
  for (const SampleRecord* r : a) {
    if (const auto it = alignment.canonical.find(r->id); it != alignment.canonical.end()) {
      by_label[it->second].first.push_back(r);
    }
  }
  for (const SampleRecord* r : b) {
    if (const auto it = alignment.canonical.find(r->id); it != alignment.canonical.end()) {
      by_label[it->second].second.push_back(r);
    }
  }

  MatchResult out;
  for (auto& [label, sides] : by_label) {
    auto& [left, right] = sides;
    struct Candidate {
      double cosine;
      RecordId a, b;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(left.size() * right.size());
    for (const SampleRecord* x : left) {
      for (const SampleRecord* y : right) {
        candidates.push_back({dot(x->description.row(0), y->description.row(0)), x->id, y->id});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& p, const Candidate& q) {
      if (p.cosine != q.cosine) return p.cosine > q.cosine;
      if (p.a != q.a) return p.a < q.a;
      return p.b < q.b;
    });
    std::map<RecordId, bool> used_a, used_b;
    for (const Candidate& c : candidates) {
      if (used_a[c.a] || used_b[c.b]) continue;
      used_a[c.a] = used_b[c.b] = true;
      out.pairs.push_back({c.a, c.b, c.cosine});
    }
    for (const SampleRecord* x : left) {
      if (!used_a[x->id]) out.unmatched_a.push_back(x->id);
    }
    for (const SampleRecord* y : right) {
      if (!used_b[y->id]) out.unmatched_b.push_back(y->id);
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const MatchedPair& p, const MatchedPair& q) { return p.a < q.a; });
  std::sort(out.unmatched_a.begin(), out.unmatched_a.end());
  std::sort(out.unmatched_b.begin(), out.unmatched_b.end());
  return out;
}

MatchIndex MatchIndex::build(const RecordStore& store, const LabelAlignment& alignment) {
  MatchIndex index;
  for (std::size_t i = 0; i < kNumModalities; ++i) {
    for (std::size_t j = i + 1; j < kNumModalities; ++j) {
      const ModalityId mi = kAllModalities[i], mj = kAllModalities[j];
      const auto a = store.of_modality(mi), b = store.of_modality(mj);
      const MatchResult m = match_samples(a, b, alignment);
      for (const MatchedPair& p : m.pairs) {
        if (alignment.canonical.at(p.a) != alignment.canonical.at(p.b)) ++index.cross_label_pairs_;
        index.partners_[{p.a, mj}] = p.b;
        index.partners_[{p.b, mi}] = p.a;
      }
    }
  }
  return index;
}

std::optional<RecordId> MatchIndex::partner(RecordId record, ModalityId other) const {
  const auto it = partners_.find({record, other});
  if (it == partners_.end()) return std::nullopt;
  return it->second;
}

std::vector<ModalityId> CombinationSample::modalities() const {
  std::vector<ModalityId> out;
  for (const auto& [m, id] : members) out.push_back(m);
  return out;
}

bool CombinationSample::contains(ModalityId m) const {
  return std::any_of(members.begin(), members.end(), [m](const auto& p) { return p.first == m; });
}

std::string combination_key(std::span<const ModalityId> modalities) {
  std::vector<ModalityId> sorted(modalities.begin(), modalities.end());
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (ModalityId m : sorted) {
    if (!out.empty()) out += "+";
    out += modality_name(m);
  }
  return out;
}

std::string DatasetManifest::serialize() const {
  std::ostringstream out;
  out << "# omnibind-manifest-1 total=" << total << " seed=" << seed << " source_hash=" << source_hash
      << " proportions=";
  for (std::size_t i = 0; i < proportions.size(); ++i) out << (i ? "," : "") << shortest(proportions[i]);
  out << "\n";
  for (const auto& s : samples) {
    out << s.id << " | " << s.label << " | " << s.size() << " | ";
    for (std::size_t i = 0; i < s.members.size(); ++i) {
      out << (i ? "," : "") << modality_name(s.members[i].first) << ":" << s.members[i].second;
    }
    out << "\n";
  }
  return out.str();
}

DatasetManifest DatasetManifest::parse(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      for (const auto& tok : split(line, ' ')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "total") m.total = parse_u64(val, "total");
        if (key == "seed") m.seed = parse_u64(val, "seed");
        if (key == "source_hash") m.source_hash = parse_u64(val, "source_hash");
        if (key == "proportions") {
          const auto parts = split(val, ',');
          for (std::size_t i = 0; i < std::min<std::size_t>(4, parts.size()); ++i) {
            m.proportions[i] = std::stod(parts[i]);
          }
        }
      }
      continue;
    }
    const auto fields = split(line, '|');
    if (fields.size() != 4) throw IoError("manifest: malformed line '" + line + "'");
    CombinationSample s;
    s.id = static_cast<std::uint32_t>(parse_u64(trim(fields[0]), "sample id"));
    s.label = parse_u64(trim(fields[1]), "label id");
    const std::size_t size = parse_u64(trim(fields[2]), "size");
    for (const auto& member : split(trim(fields[3]), ',')) {
      const auto colon = member.find(':');
      if (colon == std::string::npos) throw IoError("manifest: malformed member '" + member + "'");
      s.members.emplace_back(parse_modality(member.substr(0, colon)),
                             static_cast<RecordId>(parse_u64(member.substr(colon + 1), "record id")));
    }
    if (s.members.size() != size) throw IoError("manifest: size column disagrees with members");
    m.samples.push_back(std::move(s));
  }
  return m;
}

std::uint64_t DatasetManifest::hash() const { return fnv1a(serialize()); }

double DatasetManifest::realized_proportion(std::size_t n) const {
  if (total == 0) return 0.0;
  const auto count = std::count_if(samples.begin(), samples.end(),
                                   [n](const CombinationSample& s) { return s.size() == n; });
  return static_cast<double>(count) / static_cast<double>(total);
}

DatasetManifest build_manifest(const RecordStore& store, const LabelAlignment& alignment,
                               const MatchIndex& matches, const ManifestRequest& request) {
  if (request.total < 100 && request.only_combinations.empty()) {
    throw ConfigError("manifest total must be at least 100");
  }
  double psum = 0.0;
  for (double p : request.proportions) psum += p;
  if (psum > 1.0 + 1e-9) throw ConfigError("manifest proportions must sum to at most 1");

  // per (modality, class) accepted record ids
  std::map<std::pair<ModalityId, std::size_t>, std::vector<RecordId>> pool;
  std::size_t num_classes = 0;
  for (const auto& [id, c] : alignment.canonical) {
    pool[{store.at(id).modality, c}].push_back(id);
    num_classes = std::max(num_classes, c + 1);
  }

  DatasetManifest manifest;
  manifest.proportions = request.proportions;
  manifest.total = request.total;
  manifest.seed = request.seed;
  std::uint64_t h = fnv1a("records");
  for (const auto& r : store.records()) h = fnv1a(r.surface_label, mix_seed(h, r.id));
  manifest.source_hash = h;

  Rng rng(mix_seed(request.seed, 0x3a71));
  auto draw = [&](const std::vector<ModalityId>& subset) {
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const bool ok = std::all_of(subset.begin(), subset.end(), [&](ModalityId m) {
        const auto it = pool.find({m, c});
        return it != pool.end() && !it->second.empty();
      });
      if (ok) classes.push_back(c);
    }
    if (classes.empty()) {
      throw ConfigError("insufficient records for combination " + combination_key(subset));
    }
    const std::size_t c = classes[rng.below(classes.size())];
    ModalityId pivot = subset.front();
    for (ModalityId m : subset) {
      if (pool[{m, c}].size() < pool[{pivot, c}].size()) pivot = m;
    }
    const auto& candidates = pool[{pivot, c}];
    const RecordId anchor = candidates[rng.below(candidates.size())];
    CombinationSample s;
    s.id = static_cast<std::uint32_t>(manifest.samples.size());
    s.label = c;
    for (ModalityId m : subset) {
      if (m == pivot) {
        s.members.emplace_back(m, anchor);
        continue;
      }
      auto partner = matches.partner(anchor, m);
      if (!partner) {
        // Pivot has the fewest records, so this only happens when matching
        // was built from a different alignment.
        const auto& alt = pool[{m, c}];
        partner = alt[rng.below(alt.size())];
      }
      s.members.emplace_back(m, *partner);
    }
    manifest.samples.push_back(std::move(s));
  };

  if (!request.only_combinations.empty()) {
    for (std::size_t i = 0; i < request.total; ++i) {
      auto subset = request.only_combinations[rng.below(request.only_combinations.size())];
      std::sort(subset.begin(), subset.end());
      draw(subset);
    }
    return manifest;
  }

  for (std::size_t k = 0; k < request.proportions.size(); ++k) {
    const std::size_t n = k + 2;
    const auto count = static_cast<std::size_t>(std::llround(request.proportions[k] * request.total));
    std::vector<std::vector<ModalityId>> subsets;
    std::vector<ModalityId> cur;
    enumerate_subsets(n, 0, cur, subsets);
    for (std::size_t i = 0; i < count; ++i) draw(subsets[rng.below(subsets.size())]);
  }
  return manifest;
}

BuiltDataset build_dataset(const SemanticWorld& world, const DatasetConfig& cfg, std::size_t total,
                           std::uint64_t seed) {
  BuiltDataset out;
  out.store = generate_records(world, cfg, mix_seed(seed, 1));
  out.alignment = align_labels(out.store.records(), world.synonyms());
  const MatchIndex matches = MatchIndex::build(out.store, out.alignment);
  ManifestRequest request;
  request.proportions = cfg.proportions;
  request.total = total;
  request.seed = seed;
  out.manifest = build_manifest(out.store, out.alignment, matches, request);
  return out;
}

FeatureMap gather_features(const CombinationSample& sample, const RecordStore& store) {
  FeatureMap out;
  for (const auto& [m, id] : sample.members) {
    const SampleRecord& r = store.at(id);
    if (r.modality != m) throw ValidationError("manifest member modality disagrees with record");
    out.emplace(m, r.features);
  }
  return out;
}

NoisyFeatures inject_noise(const CombinationSample& sample, const FeatureMap& features,
                           const NoiseSpec& spec) {
  if (features.empty()) throw ValidationError("inject_noise: sample has no modalities");
  Rng rng(mix_seed(spec.seed, sample.id));
  ModalityId target;
  if (spec.target) {
    if (!features.contains(*spec.target)) {
      throw ValidationError("inject_noise: target modality " + std::string(modality_name(*spec.target)) +
                            " absent from the sample");
    }
    target = *spec.target;
  } else {
    auto it = features.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.below(features.size())));
    target = it->first;
  }
  NoisyFeatures out{features, target};
  if (spec.magnitude == 0.0) return out;
  Tensor& x = out.features.at(target);
  Tensor g(x.rows(), x.cols());
  for (double& v : g.values()) v = rng.normal();
  const double ratio = norm(x.values()) / norm(g.values());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = (1.0 - spec.magnitude) * x[i] + spec.magnitude * g[i] * ratio;
  }
  return out;
}

}  // namespace omnibind
