// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace divseq {

namespace {

struct CorpusLine {
  std::vector<std::string> source;
  std::vector<std::string> target;
  Index line_number = 0;
};

// Reads `source<TAB>target` lines. Blank lines are skipped.
std::vector<CorpusLine> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read corpus file " + path.string());
  std::vector<CorpusLine> lines;
  std::string line;
  Index number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw CorpusError("malformed line " + std::to_string(number) + ": missing tab separator");
    CorpusLine parsed;
    parsed.source = split_tokens(std::string_view(line).substr(0, tab));
    parsed.target = split_tokens(std::string_view(line).substr(tab + 1));
    parsed.line_number = number;
    if (parsed.source.empty()) throw CorpusError("empty source at line " + std::to_string(number));
    if (parsed.target.empty()) throw CorpusError("empty target at line " + std::to_string(number));
    for (const auto* side : {&parsed.source, &parsed.target}) {
      for (const auto& tok : *side) {
        if (tok != "<unk>" && Vocabulary::find_reserved_literal(tok))
          throw CorpusError("reserved token " + tok + " in corpus text at line " + std::to_string(number));
      }
    }
    lines.push_back(std::move(parsed));
  }
  return lines;
}

}  // namespace

const std::vector<std::string>& Vocabulary::reserved_literals() {
  static const std::vector<std::string> literals = {"<pad>", "<unk>", "<bos>", "<eos>", "<div>"};
  return literals;
}

bool Vocabulary::find_reserved_literal(std::string_view token) {
  const auto& lits = reserved_literals();
  return std::find(lits.begin(), lits.end(), token) != lits.end();
}

Vocabulary::Vocabulary() {
  for (const auto& lit : reserved_literals()) {
    index_.emplace(lit, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(lit);
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& content) {
  Vocabulary vocab;
  for (const auto& tok : content) {
    if (tok.empty() || tok.find_first_of(" \t\n") != std::string::npos)
      throw CorpusError("invalid vocabulary token '" + tok + "'");
    if (!vocab.index_.emplace(tok, static_cast<TokenId>(vocab.tokens_.size())).second)
      throw CorpusError("duplicate or reserved vocabulary token '" + tok + "'");
    vocab.tokens_.push_back(tok);
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read vocabulary file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  const auto& lits = reserved_literals();
  if (lines.size() < lits.size() || !std::equal(lits.begin(), lits.end(), lines.begin()))
    throw CorpusError("vocabulary file " + path.string() + " does not start with the reserved tokens");
  return from_tokens(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(lits.size()), lines.end()));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write vocabulary file " + path.string());
  for (const auto& tok : tokens_) out << tok << '\n';
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size()) throw CorpusError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode(const std::vector<std::string>& words) const {
  TokenSeq ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const TokenSeq& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (auto id : ids) words.push_back(token(id));
  return words;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& tok : tokens_) {
    for (unsigned char ch : tok) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    h ^= 0x0a;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary build_vocabulary(const std::filesystem::path& corpus_path, Index min_count, Index max_size,
                            VocabularyBuildReport* report) {
  auto lines = read_corpus(corpus_path);

  struct Entry {
    Index count = 0;
    Index first = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  Index position = 0;
  for (const auto& line : lines) {
    for (const auto* side : {&line.source, &line.target}) {
      for (const auto& tok : *side) {
        if (tok == "<unk>") {
          ++position;
          continue;
        }
        auto [it, inserted] = counts.try_emplace(tok, Entry{0, position});
        ++it->second.count;
        ++position;
      }
    }
  }
  if (position == 0) throw CorpusError("empty corpus");

  std::vector<std::pair<std::string, Entry>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });

  std::vector<std::string> kept;
  for (const auto& [tok, entry] : ranked) {
    if (entry.count < min_count) break;
    if (max_size > 0 && static_cast<Index>(kept.size()) >= max_size) break;
    kept.push_back(tok);
  }

  VocabularyBuildReport local;
  local.distinct_tokens = static_cast<Index>(counts.size());
  local.total_tokens = position;
  if (kept.empty()) local.warnings.push_back("error: no corpus token met min-count " + std::to_string(min_count));
  if (report) *report = std::move(local);
  return Vocabulary::from_tokens(kept);
}

DialogueExample make_example(const std::vector<std::string>& source, const std::vector<std::string>& target,
                             const Vocabulary& vocab, LengthCaps caps) {
  DialogueExample ex;
  ex.source = vocab.encode(source);
  if (caps.source > 0 && static_cast<Index>(ex.source.size()) > caps.source)
    ex.source.erase(ex.source.begin(), ex.source.end() - caps.source);
  ex.target = vocab.encode(target);
  if (caps.target > 0 && static_cast<Index>(ex.target.size()) > caps.target - 1)
    ex.target.resize(static_cast<std::size_t>(std::max<Index>(caps.target - 1, 0)));
  ex.target.push_back(kEos);
  return ex;
}

std::vector<DialogueExample> load_examples(const std::filesystem::path& corpus_path, const Vocabulary& vocab,
                                           LengthCaps caps) {
  auto lines = read_corpus(corpus_path);
  std::vector<DialogueExample> examples;
  examples.reserve(lines.size());
  for (const auto& line : lines) examples.push_back(make_example(line.source, line.target, vocab, caps));
  return examples;
}

Index PaddedBatch::target_tokens() const { return target_mask.cast<Index>().sum(); }

PaddedBatch pad_batch(const std::vector<DialogueExample>& examples, const std::vector<Index>& ids) {
  PaddedBatch batch;
  const auto rows = static_cast<Index>(ids.size());
  Index max_src = 1, max_tgt = 1;
  for (auto id : ids) {
    const auto& ex = examples.at(static_cast<std::size_t>(id));
    max_src = std::max(max_src, static_cast<Index>(ex.source.size()));
    max_tgt = std::max(max_tgt, static_cast<Index>(ex.target.size()));
  }
  batch.source = TokenMatrix::Constant(rows, max_src, kPad);
  batch.target = TokenMatrix::Constant(rows, max_tgt, kPad);
  batch.target_mask = MaskMatrix::Zero(rows, max_tgt);
  batch.source_lengths.resize(static_cast<std::size_t>(rows));
  batch.example_ids = ids;
  for (Index r = 0; r < rows; ++r) {
    const auto& ex = examples[static_cast<std::size_t>(ids[static_cast<std::size_t>(r)])];
    for (std::size_t t = 0; t < ex.source.size(); ++t) batch.source(r, static_cast<Index>(t)) = ex.source[t];
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      batch.target(r, static_cast<Index>(t)) = ex.target[t];
      batch.target_mask(r, static_cast<Index>(t)) = 1;
    }
    batch.source_lengths[static_cast<std::size_t>(r)] = static_cast<Index>(ex.source.size());
  }
  return batch;
}

std::vector<PaddedBatch> make_batches(const std::vector<DialogueExample>& examples, Index batch_size,
                                      std::uint64_t shuffle_seed, bool shuffle) {
  if (batch_size < 1) throw CorpusError("batch size must be at least 1");
  std::vector<Index> order(examples.size());
  std::iota(order.begin(), order.end(), Index{0});
  if (shuffle) {
    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<PaddedBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    auto stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    batches.push_back(pad_batch(examples, std::vector<Index>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                             order.begin() + static_cast<std::ptrdiff_t>(stop))));
  }
  return batches;
}

PaddedBatch source_batch(const std::vector<TokenSeq>& sources) {
  std::vector<DialogueExample> examples;
  examples.reserve(sources.size());
  for (const auto& src : sources) {
    if (src.empty()) throw CorpusError("empty source sequence");
    examples.push_back({src, {kEos}});
  }
  std::vector<Index> ids(examples.size());
  std::iota(ids.begin(), ids.end(), Index{0});
  return pad_batch(examples, ids);
}

namespace {

const std::vector<std::string> kVerbs = {
    "install", "upgrade", "remove",  "configure", "mount",   "compile", "update",    "reinstall",
    "restart", "enable",  "disable", "download",  "patch",   "backup",  "restore",   "format",
    "partition", "boot",  "load",    "unload",    "build",   "debug",   "rename",    "share"};
const std::vector<std::string> kNouns = {
    "grub",  "kernel", "driver", "firefox", "wifi",  "xorg",    "apache",  "python", "java",   "nvidia",
    "samba", "ssh",    "cron",   "gnome",   "kde",   "vlc",     "alsa",    "pulseaudio", "postfix", "mysql",
    "nginx", "docker", "vim",    "emacs",   "thunderbird", "wine", "gcc",  "lvm",    "swap",   "raid"};
const std::vector<std::string> kSystems = {"ubuntu", "debian",   "lucid",   "hardy",   "karmic",
                                           "jaunty", "natty",    "maverick", "precise", "xenial"};
// {0}=verb {1}=noun {2}=system
const std::vector<std::vector<std::string>> kTemplates = {
    {"how", "to", "{0}", "{1}", "on", "{2}"},
    {"cannot", "{0}", "{1}", "in", "{2}"},
    {"need", "help", "to", "{0}", "{1}", "with", "{2}"},
    {"trying", "to", "{0}", "{1}", "under", "{2}", "today"},
};

}  // namespace

Index generate_synthetic_corpus(Index num_examples, double dull_fraction, std::uint64_t seed,
                                const std::filesystem::path& out_path) {
  if (num_examples < 0) throw CorpusError("number of examples must be non-negative");
  if (!(dull_fraction >= 0.0 && dull_fraction <= 1.0)) throw CorpusError("dull fraction must lie in [0, 1]");
  const auto capacity = static_cast<Index>(kVerbs.size() * kNouns.size() * kSystems.size());
  if (num_examples > capacity)
    throw CorpusError("synthetic grammar yields at most " + std::to_string(capacity) + " unique contexts");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, capacity - 1);
  std::uniform_int_distribution<std::size_t> pick_template(0, kTemplates.size() - 1);
  std::bernoulli_distribution dull(dull_fraction);
  std::set<Index> used;

  std::ofstream out(out_path);
  if (!out) throw CorpusError("cannot write corpus file " + out_path.string());
  Index dull_count = 0;
  for (Index n = 0; n < num_examples; ++n) {
    Index code = pick(rng);
    while (!used.insert(code).second) code = pick(rng);
    Index rest = code;
    const auto& verb = kVerbs[static_cast<std::size_t>(rest % static_cast<Index>(kVerbs.size()))];
    rest /= static_cast<Index>(kVerbs.size());
    const auto& noun = kNouns[static_cast<std::size_t>(rest % static_cast<Index>(kNouns.size()))];
    rest /= static_cast<Index>(kNouns.size());
    const auto& system = kSystems[static_cast<std::size_t>(rest % static_cast<Index>(kSystems.size()))];
    const auto& tmpl = kTemplates[pick_template(rng)];

    std::ostringstream context;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
      if (i) context << ' ';
      if (tmpl[i] == "{0}") context << verb;
      else if (tmpl[i] == "{1}") context << noun;
      else if (tmpl[i] == "{2}") context << system;
      else context << tmpl[i];
    }
    out << context.str() << '\t';
    if (dull(rng)) {
      out << kDullResponse;
      ++dull_count;
    } else {
      out << verb << ' ' << noun << ' ' << system;
    }
    out << '\n';
  }
  return dull_count;
}

}  // namespace divseq
