// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>

#include "divseq/losses.hpp"

namespace divseq::testing {

inline ModelConfig tiny_config(bool label = false, Index vocab = 20) {
  return {vocab, 8, 8, 16, 8, label};
}

/// Two rows, source lengths 3 and 5, target lengths 3 and 2 (EOS included).
inline PaddedBatch tiny_batch() {
  std::vector<DialogueExample> ex = {{{5, 6, 7}, {8, 9, kEos}}, {{5, 6, 7, 8, 9}, {10, kEos}}};
  return pad_batch(ex, {0, 1});
}

/// AvgOut tracker over `vocab` ids with extra mass on `heavy`.
inline AvgOutTracker<double> peaked_tracker(Index vocab, TokenId heavy, double extra = 0.5) {
  AvgOutTracker<double> t(content_support<double>(vocab), 0.01);
  Vector<double> d = t.distribution();
  d(heavy) += extra;
  d /= d.sum();
  return AvgOutTracker<double>::from_state(d, t.support(), 0.01, 3);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "divseq") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct GradientCheck {
  Index checked = 0;
  Index within_tight = 0;  // relative error <= 1e-3
  double worst = 0.0;
  double fraction_tight() const { return checked ? static_cast<double>(within_tight) / checked : 1.0; }
};

/// Central differences (h = 1e-4) against `analytic` for every parameter.
/// Relative error is |n - a| / max(|n|, |a|, 1e-6).
inline GradientCheck check_gradient(const Seq2SeqParams<double>& params, const Seq2SeqParams<double>& analytic,
                                    const std::function<double(const Seq2SeqParams<double>&)>& loss,
                                    double h = 1e-4) {
  GradientCheck out;
  const Vector<double> flat = params.flatten(), grad = analytic.flatten();
  auto probe = params;
  Vector<double> f = flat;
  for (Index i = 0; i < flat.size(); ++i) {
    f(i) = flat(i) + h;
    probe.unflatten(f);
    const double up = loss(probe);
    f(i) = flat(i) - h;
    probe.unflatten(f);
    const double down = loss(probe);
    f(i) = flat(i);
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(numeric - grad(i)) / std::max({std::abs(numeric), std::abs(grad(i)), 1e-6});
    ++out.checked;
    if (rel <= 1e-3) ++out.within_tight;
    out.worst = std::max(out.worst, rel);
  }
  return out;
}

}  // namespace divseq::testing
