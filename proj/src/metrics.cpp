// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "divseq/corpus.hpp"
#include "json.hpp"

namespace divseq {

namespace {

std::string join(const Response& r, std::size_t begin, std::size_t end, char sep) {
  std::string s;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) s.push_back(sep);
    s += r[i];
  }
  return s;
}

int order_of(Granularity g) {
  switch (g) {
    case Granularity::unigram: return 1;
    case Granularity::bigram: return 2;
    case Granularity::trigram: return 3;
    case Granularity::sentence: return 0;
  }
  return 0;
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::set<std::string> lexicon_matches(const Response& r, const std::set<std::string>& lexicon) {
  std::set<std::string> found;
  for (const auto& tok : r) {
    auto low = lowercase(tok);
    if (lexicon.count(low)) found.insert(std::move(low));
  }
  return found;
}

}  // namespace

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::sentence: return "sentence";
    case Granularity::unigram: return "unigram";
    case Granularity::bigram: return "bigram";
    case Granularity::trigram: return "trigram";
  }
  return "?";
}

Response clean_response(const Response& r) {
  Response out;
  for (const auto& tok : r)
    if (tok != "<eos>" && tok != "<pad>") out.push_back(tok);
  return out;
}

double distinct_n(const std::vector<Response>& responses, int n) {
  if (n < 1) throw MetricsError("n-gram order must be positive");
  std::set<std::string> unique;
  Index total = 0;
  for (const auto& raw : responses) {
    auto r = clean_response(raw);
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i) {
      unique.insert(join(r, i, i + static_cast<std::size_t>(n), '\x1f'));
      ++total;
    }
  }
  if (total == 0) throw MetricsError("no " + std::to_string(n) + "-grams available");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

FrequencySpectrum frequency_spectrum(const std::vector<Response>& responses, Granularity granularity) {
  std::unordered_map<std::string, Index> counts;
  Index total = 0;
  const int n = order_of(granularity);
  for (const auto& raw : responses) {
    auto r = clean_response(raw);
    if (n == 0) {
      ++counts[join(r, 0, r.size(), ' ')];
      ++total;
      continue;
    }
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i) {
      ++counts[join(r, i, i + static_cast<std::size_t>(n), '\x1f')];
      ++total;
    }
  }
  std::vector<Index> sorted;
  sorted.reserve(counts.size());
  for (const auto& [item, c] : counts) sorted.push_back(c);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  FrequencySpectrum spec;
  spec.granularity = granularity;
  spec.item_count = static_cast<Index>(sorted.size());
  for (auto c : sorted) spec.frequencies.push_back(static_cast<double>(c) / static_cast<double>(total));
  return spec;
}

double inverted_auc(const FrequencySpectrum& spectrum, Index k) {
  if (k < 1) throw MetricsError("k must be positive");
  double tail = 0.0;
  for (std::size_t i = static_cast<std::size_t>(k); i < spectrum.frequencies.size(); ++i)
    tail += spectrum.frequencies[i];
  return std::clamp(tail, 0.0, 1.0);
}

std::vector<double> top_k_curve(const FrequencySpectrum& spectrum, Index k) {
  const auto n = std::min<std::size_t>(spectrum.frequencies.size(), static_cast<std::size_t>(k));
  return {spectrum.frequencies.begin(), spectrum.frequencies.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::set<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot read lexicon " + path.string());
  std::set<std::string> lex;
  std::string line;
  while (std::getline(in, line)) {
    for (auto& tok : split_tokens(line)) lex.insert(lowercase(tok));
  }
  if (lex.empty()) throw MetricsError("lexicon " + path.string() + " is empty");
  return lex;
}

double F1Counts::precision() const {
  return predicted == 0 ? 0.0 : static_cast<double>(true_positive) / static_cast<double>(predicted);
}
double F1Counts::recall() const {
  return gold == 0 ? 0.0 : static_cast<double>(true_positive) / static_cast<double>(gold);
}
double F1Counts::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

F1Counts lexicon_f1(const std::vector<Response>& model, const std::vector<Response>& gold,
                    const std::set<std::string>& lexicon) {
  if (lexicon.empty()) throw MetricsError("empty lexicon");
  if (model.size() != gold.size()) throw MetricsError("model and reference corpora differ in length");
  F1Counts counts;
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto g = lexicon_matches(gold[i], lexicon);
    if (g.empty()) continue;
    auto m = lexicon_matches(model[i], lexicon);
    for (const auto& item : m) counts.true_positive += static_cast<Index>(g.count(item));
    counts.predicted += static_cast<Index>(m.size());
    counts.gold += static_cast<Index>(g.size());
  }
  return counts;
}

std::pair<double, double> activity_entity_f1(const std::vector<Response>& model, const std::vector<Response>& gold,
                                             const LexiconF1Input& lexicons) {
  return {lexicon_f1(model, gold, lexicons.activities).f1(), lexicon_f1(model, gold, lexicons.entities).f1()};
}

DiversityReport evaluate_corpus(const std::vector<Response>& responses, const std::vector<Response>* references,
                                const LexiconF1Input* lexicons) {
  if (responses.empty()) throw MetricsError("no responses to evaluate");
  DiversityReport report;
  report.num_responses = static_cast<Index>(responses.size());
  report.distinct_1 = distinct_n(responses, 1);
  report.distinct_2 = distinct_n(responses, 2);
  double sum = 0.0;
  for (std::size_t g = 0; g < kGranularities.size(); ++g) {
    auto spec = frequency_spectrum(responses, kGranularities[g]);
    report.iauc[g] = inverted_auc(spec);
    report.curves[g] = top_k_curve(spec);
    sum += report.iauc[g];
  }
  report.iauc_avg = sum / 4.0;
  if (lexicons) {
    if (!references) throw MetricsError("F1 needs reference responses");
    auto [act, ent] = activity_entity_f1(responses, *references, *lexicons);
    report.activity_f1 = act;
    report.entity_f1 = ent;
  }
  return report;
}

std::string report_to_json(const DiversityReport& report) {
  nlohmann::ordered_json j;
  j["num_responses"] = report.num_responses;
  j["distinct_1"] = report.distinct_1;
  j["distinct_2"] = report.distinct_2;
  j["iauc_s"] = report.iauc[0];
  j["iauc_1"] = report.iauc[1];
  j["iauc_2"] = report.iauc[2];
  j["iauc_3"] = report.iauc[3];
  j["iauc_avg"] = report.iauc_avg;
  auto& curves = j["diversity32"];
  curves = nlohmann::ordered_json::object();
  for (std::size_t g = 0; g < kGranularities.size(); ++g) curves[to_string(kGranularities[g])] = report.curves[g];
  if (report.activity_f1) j["activity_f1"] = *report.activity_f1;
  if (report.entity_f1) j["entity_f1"] = *report.entity_f1;
  return j.dump(2) + "\n";
}

DiversityReport report_from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    DiversityReport r;
    r.num_responses = j.at("num_responses").get<Index>();
    r.distinct_1 = j.at("distinct_1").get<double>();
    r.distinct_2 = j.at("distinct_2").get<double>();
    r.iauc = {j.at("iauc_s").get<double>(), j.at("iauc_1").get<double>(), j.at("iauc_2").get<double>(),
              j.at("iauc_3").get<double>()};
    r.iauc_avg = j.at("iauc_avg").get<double>();
    const auto& curves = j.at("diversity32");
    for (std::size_t g = 0; g < kGranularities.size(); ++g)
      r.curves[g] = curves.at(to_string(kGranularities[g])).get<std::vector<double>>();
    if (j.contains("activity_f1")) r.activity_f1 = j["activity_f1"].get<double>();
    if (j.contains("entity_f1")) r.entity_f1 = j["entity_f1"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw MetricsError(std::string("malformed report: ") + e.what());
  }
}

void write_report(const DiversityReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MetricsError("cannot write report " + path.string());
  out << report_to_json(report);
}

DiversityReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot read report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

std::vector<std::filesystem::path> emit_curves(const std::filesystem::path& report_path,
                                               const std::filesystem::path& out_dir) {
  auto report = read_report(report_path);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (std::size_t g = 0; g < kGranularities.size(); ++g) {
    const auto& curve = report.curves[g];
    if (curve.size() > 32) throw MetricsError("malformed report: curve longer than 32 entries");
    auto path = out_dir / ("diversity32_" + to_string(kGranularities[g]) + ".csv");
    std::ofstream out(path);
    if (!out) throw MetricsError("cannot write " + path.string());
    out << "rank,frequency\n";
    char buf[64];
    for (std::size_t rank = 0; rank < 32; ++rank) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", rank + 1, rank < curve.size() ? curve[rank] : 0.0);
      out << buf;
    }
    written.push_back(path);
  }
  return written;
}

std::vector<Response> read_responses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot read responses " + path.string());
  std::vector<Response> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto tab = line.find('\t');
    if (tab != std::string::npos) line = line.substr(tab + 1);
    out.push_back(split_tokens(line));
  }
  return out;
}

}  // namespace divseq
