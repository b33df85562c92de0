// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "divseq/types.hpp"

namespace divseq {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Response = std::vector<std::string>;

enum class Granularity { sentence, unigram, bigram, trigram };
inline constexpr std::array<Granularity, 4> kGranularities = {Granularity::sentence, Granularity::unigram,
                                                              Granularity::bigram, Granularity::trigram};
std::string to_string(Granularity g);

/// Strips <eos>/<pad> tokens.
Response clean_response(const Response& r);

/// Unique n-grams over total n-grams across the corpus.
double distinct_n(const std::vector<Response>& responses, int n);

struct FrequencySpectrum {
  Granularity granularity = Granularity::unigram;
  std::vector<double> frequencies;  // normalized, descending
  Index item_count = 0;
};

FrequencySpectrum frequency_spectrum(const std::vector<Response>& responses, Granularity granularity);

/// One minus the mass of the k most frequent items. An empty spectrum scores 0.
double inverted_auc(const FrequencySpectrum& spectrum, Index k = 32);

/// The k largest frequencies.
std::vector<double> top_k_curve(const FrequencySpectrum& spectrum, Index k = 32);

struct LexiconF1Input {
  std::set<std::string> activities;
  std::set<std::string> entities;
};

std::set<std::string> load_lexicon(const std::filesystem::path& path);

struct F1Counts {
  Index true_positive = 0;
  Index predicted = 0;
  Index gold = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};

/// Micro-averaged F1 over lowercased exact lexicon matches. Pairs whose gold
/// response has no lexicon item are skipped.
F1Counts lexicon_f1(const std::vector<Response>& model, const std::vector<Response>& gold,
                    const std::set<std::string>& lexicon);

std::pair<double, double> activity_entity_f1(const std::vector<Response>& model, const std::vector<Response>& gold,
                                             const LexiconF1Input& lexicons);

struct DiversityReport {
  Index num_responses = 0;
  double distinct_1 = 0.0;
  double distinct_2 = 0.0;
  std::array<double, 4> iauc{};  // sentence, unigram, bigram, trigram
  double iauc_avg = 0.0;
  std::array<std::vector<double>, 4> curves;  // top-32 per granularity
  std::optional<double> activity_f1;
  std::optional<double> entity_f1;
};

DiversityReport evaluate_corpus(const std::vector<Response>& responses,
                                const std::vector<Response>* references = nullptr,
                                const LexiconF1Input* lexicons = nullptr);

std::string report_to_json(const DiversityReport& report);
DiversityReport report_from_json(const std::string& text);
void write_report(const DiversityReport& report, const std::filesystem::path& path);
DiversityReport read_report(const std::filesystem::path& path);

/// Writes diversity32_<granularity>.csv (rank,frequency; ranks 1-32, zero
/// padded) for each granularity. Returns the written paths.
std::vector<std::filesystem::path> emit_curves(const std::filesystem::path& report_path,
                                               const std::filesystem::path& out_dir);

/// One response per line. Lines containing a tab keep only the part after it.
std::vector<Response> read_responses(const std::filesystem::path& path);

}  // namespace divseq
