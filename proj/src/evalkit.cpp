#include "omnibind/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "omnibind/error.hpp"

namespace omnibind {

namespace {

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

double percent(std::size_t correct, std::size_t n) {
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

const CombinationAccuracy* AccuracyTable::find(const std::string& combination) const {
  for (const auto& r : rows) {
    if (r.combination == combination) return &r;
  }
  return nullptr;
}

double AccuracyTable::group(std::size_t size) const {
  const auto it = by_size.find(size);
  return it == by_size.end() ? 0.0 : it->second;
}

AccuracyTable summarize(std::span<const SampleOutcome> outcomes, std::span<const std::string> expected) {
  std::map<std::pair<std::size_t, std::string>, CombinationAccuracy> rows;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> sizes;
  AccuracyTable table;
  std::size_t correct = 0;
  for (const auto& o : outcomes) {
    auto& row = rows[{o.size, o.combination}];
    row.combination = o.combination;
    row.size = o.size;
    ++row.samples;
    row.correct += o.correct() ? 1 : 0;
    auto& [c, n] = sizes[o.size];
    c += o.correct() ? 1 : 0;
    ++n;
    correct += o.correct() ? 1 : 0;
  }
  for (auto& [key, row] : rows) {
    row.accuracy = percent(row.correct, row.samples);
    table.rows.push_back(row);
  }
  for (const auto& [size, cn] : sizes) table.by_size[size] = percent(cn.first, cn.second);
  table.samples = outcomes.size();
  table.total = percent(correct, outcomes.size());
  for (const auto& key : expected) {
    if (table.find(key) == nullptr) {
      table.warnings.push_back("combination " + key + " has no eval samples; omitted");
    }
  }
  return table;
}

std::size_t eval_threads() {
  const char* env = std::getenv("OMNIBIND_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0' || v == 0) return 1;
  return static_cast<std::size_t>(v);
}

Predictor fusion_predictor(const FusionModel& model, const Tensor& labels) {
  return [&model, &labels](const std::map<ModalityId, Tensor>& emb) { return infer(emb, model, labels); };
}

std::vector<SampleOutcome> evaluate(const DatasetManifest& manifest, const EvalContext& ctx,
                                    const Predictor& predict, const NoiseSpec* noise, std::size_t threads) {
  if (ctx.encoders == nullptr || ctx.store == nullptr || ctx.cache == nullptr) {
    throw ValidationError("evaluate: incomplete evaluation context");
  }
  std::vector<SampleOutcome> out(manifest.samples.size());
  parallel_for(manifest.samples.size(), threads, [&](std::size_t i) {
    const CombinationSample& s = manifest.samples[i];
    const auto emb = sample_embeddings(s, *ctx.cache, *ctx.encoders, *ctx.store, noise);
    const auto mods = s.modalities();
    out[i] = {s.id, combination_key(mods), s.size(), s.label, predict(emb)};
  });
  return out;
}

std::map<ModalityId, double> per_modality_accuracy(const EvalContext& ctx, const LabelAlignment& alignment) {
  std::map<ModalityId, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& r : ctx.store->records()) {
    const auto it = alignment.canonical.find(r.id);
    if (it == alignment.canonical.end()) continue;
    auto& [c, n] = counts[r.modality];
    c += argmax(matmul_nt(ctx.cache->at(r.id), ctx.labels)) == it->second ? 1 : 0;
    ++n;
  }
  std::map<ModalityId, double> out;
  for (const auto& [m, cn] : counts) out[m] = percent(cn.first, cn.second);
  return out;
}

std::vector<BaselineRow> eval_fusion_baselines(const DatasetManifest& manifest, const EvalContext& ctx,
                                               std::span<const NamedModel> models, const NoiseSpec* noise,
                                               std::size_t threads) {
  std::vector<BaselineRow> rows;
  for (const NamedModel& m : models) {
    const auto outcomes = evaluate(manifest, ctx, fusion_predictor(*m.model, ctx.labels), noise, threads);
    rows.push_back({m.name, summarize(outcomes)});
  }
  return rows;
}

std::vector<RobustnessCell> eval_robustness(const DatasetManifest& manifest, const EvalContext& ctx,
                                            const Predictor& predict, double magnitude, std::uint64_t seed,
                                            std::size_t threads) {
  const AccuracyTable clean = summarize(evaluate(manifest, ctx, predict, nullptr, threads));
  std::map<ModalityId, AccuracyTable> noisy;
  for (ModalityId target : kAllModalities) {
    DatasetManifest subset;
    for (const auto& s : manifest.samples) {
      if (s.contains(target)) subset.samples.push_back(s);
    }
    const NoiseSpec spec{target, magnitude, seed};
    noisy[target] = summarize(evaluate(subset, ctx, predict, &spec, threads));
  }
  std::vector<RobustnessCell> cells;
  for (const auto& row : clean.rows) {
    for (ModalityId target : kAllModalities) {
      RobustnessCell cell;
      cell.combination = row.combination;
      cell.size = row.size;
      cell.target = target;
      cell.samples = row.samples;
      cell.clean = row.accuracy;
      cell.noisy = row.accuracy;
      if (const auto* n = noisy[target].find(row.combination)) {
        cell.applicable = true;
        cell.noisy = n->accuracy;
        cell.delta = n->accuracy - row.accuracy;
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

std::vector<std::string> text_dominance_violations(std::span<const RobustnessCell> cells) {
  std::map<std::string, std::vector<const RobustnessCell*>> by_combo;
  for (const auto& c : cells) {
    if (c.applicable) by_combo[c.combination].push_back(&c);
  }
  std::vector<std::string> out;
  for (const auto& [combo, list] : by_combo) {
    const auto text = std::find_if(list.begin(), list.end(),
                                   [](const RobustnessCell* c) { return c->target == ModalityId::Text; });
    if (text == list.end()) continue;
    for (const RobustnessCell* c : list) {
      if (role_of(c->target) != ModalityRole::Student) continue;
      if ((*text)->delta > c->delta) {
        out.push_back(combo + ": text delta " + fixed2((*text)->delta) + " > " +
                      std::string(modality_name(c->target)) + " delta " + fixed2(c->delta));
      }
    }
  }
  return out;
}

std::string predictions_csv(std::span<const SampleOutcome> outcomes) {
  std::ostringstream out;
  out << "sample_id,combination,true,pred,correct\n";
  for (const auto& o : outcomes) {
    out << o.sample_id << ',' << o.combination << ',' << o.truth << ',' << o.predicted << ','
        << (o.correct() ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string accuracy_csv(const AccuracyTable& table) {
  std::ostringstream out;
  out << "combination,size,samples,accuracy\n";
  for (const auto& r : table.rows) {
    out << r.combination << ',' << r.size << ',' << r.samples << ',' << fixed4(r.accuracy) << '\n';
  }
  for (const auto& [size, acc] : table.by_size) out << size << "M,," << "," << fixed4(acc) << '\n';
  out << "Total,," << table.samples << ',' << fixed4(table.total) << '\n';
  return out.str();
}

std::string baselines_csv(std::span<const BaselineRow> rows) {
  std::ostringstream out;
  out << "strategy,2M,3M,4M,5M,Total\n";
  for (const auto& r : rows) {
    out << r.strategy;
    for (std::size_t n = 2; n <= 5; ++n) out << ',' << fixed4(r.table.group(n));
    out << ',' << fixed4(r.table.total) << '\n';
  }
  return out.str();
}

std::string robustness_csv(std::span<const RobustnessCell> cells) {
  std::ostringstream out;
  out << "combination,size,noise_target,samples,clean,noisy,delta\n";
  for (const auto& c : cells) {
    out << c.combination << ',' << c.size << ',' << modality_name(c.target) << ',' << c.samples << ','
        << fixed4(c.clean) << ',';
    if (c.applicable) {
      out << fixed4(c.noisy) << ',' << fixed4(c.delta) << '\n';
    } else {
      out << "NA,NA\n";
    }
  }
  return out.str();
}

std::string per_modality_csv(const std::map<ModalityId, double>& acc) {
  std::ostringstream out;
  out << "modality,accuracy\n";
  for (const auto& [m, a] : acc) out << modality_name(m) << ',' << fixed4(a) << '\n';
  return out.str();
}

std::string summary_json(const MetricsReport& report) {
  using nlohmann::ordered_json;
  auto round4 = [](double v) { return std::stod(fixed4(v)); };
  ordered_json j;
  j["seed"] = report.seed;
  j["config_hash"] = report.config_hash;
  j["total_aggregation"] = "sample-weighted mean over samples";
  ordered_json pm = ordered_json::object();
  for (const auto& [m, a] : report.per_modality) pm[std::string(modality_name(m))] = round4(a);
  j["per_modality_accuracy"] = pm;
  auto rows_json = [&](const std::vector<BaselineRow>& rows) {
    ordered_json out = ordered_json::object();
    for (const auto& r : rows) {
      ordered_json g;
      for (std::size_t n = 2; n <= 5; ++n) g[std::to_string(n) + "M"] = round4(r.table.group(n));
      g["Total"] = round4(r.table.total);
      g["samples"] = r.table.samples;
      out[r.strategy] = g;
    }
    return out;
  };
  j["fusion_baselines"] = rows_json(report.fusion_baselines);
  j["noisy_baselines"] = rows_json(report.noisy_baselines);
  ordered_json warnings = ordered_json::array();
  for (const auto& [name, table] : report.combination_accuracy) {
    for (const auto& w : table.warnings) warnings.push_back(name + ": " + w);
  }
  j["warnings"] = warnings;
  j["text_dominance_violations"] = report.dominance_violations;
  return j.dump(2) + "\n";
}

TableKind parse_table_kind(const std::string& s) {
  if (s == "2m") return TableKind::TwoModal;
  if (s == "345m") return TableKind::MultiModal;
  if (s == "fusion") return TableKind::Fusion;
  if (s == "robustness") return TableKind::Robustness;
  throw ConfigError("--table must be one of 2m, 345m, fusion, robustness (got '" + s + "')");
}

std::string render_table(const MetricsReport& report, TableKind kind) {
  std::ostringstream out;
  switch (kind) {
    case TableKind::TwoModal:
    case TableKind::MultiModal: {
      const bool two = kind == TableKind::TwoModal;
      out << pad("combination", 44);
      for (const auto& [name, t] : report.combination_accuracy) out << pad(name, 10);
      out << "\n";
      if (report.combination_accuracy.empty()) return out.str();
      const AccuracyTable& first = report.combination_accuracy.begin()->second;
      for (const auto& row : first.rows) {
        if ((row.size == 2) != two) continue;
        out << pad(row.combination, 44);
        for (const auto& [name, t] : report.combination_accuracy) {
          const auto* r = t.find(row.combination);
          out << pad(r ? fixed2(r->accuracy) : "-", 10);
        }
        out << "\n";
      }
      const std::vector<std::size_t> groups = two ? std::vector<std::size_t>{2} : std::vector<std::size_t>{3, 4, 5};
      for (std::size_t n : groups) {
        out << pad(std::to_string(n) + "M", 44);
        for (const auto& [name, t] : report.combination_accuracy) out << pad(fixed2(t.group(n)), 10);
        out << "\n";
      }
      out << pad("Total", 44);
      for (const auto& [name, t] : report.combination_accuracy) out << pad(fixed2(t.total), 10);
      out << "\n";
      break;
    }
    case TableKind::Fusion: {
      auto block = [&](const char* title, const std::vector<BaselineRow>& rows) {
        out << title << "\n" << pad("strategy", 16);
        for (const char* h : {"2M", "3M", "4M", "5M", "Total"}) out << pad(h, 10);
        out << "\n";
        for (const auto& r : rows) {
          out << pad(r.strategy, 16);
          for (std::size_t n = 2; n <= 5; ++n) out << pad(r.table.by_size.contains(n) ? fixed2(r.table.group(n)) : "-", 10);
          out << pad(fixed2(r.table.total), 10) << "\n";
        }
      };
      block("clean", report.fusion_baselines);
      block("random-one noise", report.noisy_baselines);
      break;
    }
    case TableKind::Robustness: {
      out << pad("combination", 44);
      for (ModalityId m : kAllModalities) out << pad(std::string(modality_name(m)), 12);
      out << "\n";
      std::string current;
      for (const auto& c : report.robustness) {
        if (c.combination != current) {
          if (!current.empty()) out << "\n";
          current = c.combination;
          out << pad(c.combination + " (" + fixed2(c.clean) + ")", 44);
        }
        out << pad(c.applicable ? fixed2(c.delta) : "-", 12);
      }
      if (!current.empty()) out << "\n";
      for (const auto& v : report.dominance_violations) out << "violation: " << v << "\n";
      break;
    }
  }
  return out.str();
}

}  // namespace omnibind
