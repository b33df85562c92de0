// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "divseq/types.hpp"

namespace divseq {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense token <-> id mapping. Ids 0-4 hold <pad> <unk> <bos> <eos> <div>.
class Vocabulary {
 public:
  Vocabulary();

  /// Reserved tokens followed by `content` in order. Duplicates and reserved
  /// literals in `content` are rejected.
  static Vocabulary from_tokens(const std::vector<std::string>& content);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Id of `token`, or kUnk when absent.
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;

  Index size() const { return static_cast<Index>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const TokenSeq& ids) const;

  /// FNV-1a over the token list, used to pair checkpoints with vocabularies.
  std::uint64_t hash() const;

  static bool is_reserved(TokenId id) { return id >= 0 && id < kNumReserved; }
  static const std::vector<std::string>& reserved_literals();
  static bool find_reserved_literal(std::string_view token);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct VocabularyBuildReport {
  Index distinct_tokens = 0;
  Index total_tokens = 0;
  std::vector<std::string> warnings;
};

/// Frequency-ranked vocabulary over both sides of a corpus file. Ties break by
/// first occurrence.
Vocabulary build_vocabulary(const std::filesystem::path& corpus_path, Index min_count, Index max_size,
                            VocabularyBuildReport* report = nullptr);

struct DialogueExample {
  TokenSeq source;
  TokenSeq target;  // EOS-terminated
};

struct LengthCaps {
  Index source = 128;
  Index target = 32;  // includes EOS
};

std::vector<std::string> split_tokens(std::string_view text);

/// Sources longer than the cap keep their tail; targets keep their head.
std::vector<DialogueExample> load_examples(const std::filesystem::path& corpus_path, const Vocabulary& vocab,
                                           LengthCaps caps = {});
DialogueExample make_example(const std::vector<std::string>& source, const std::vector<std::string>& target,
                             const Vocabulary& vocab, LengthCaps caps = {});

struct PaddedBatch {
  TokenMatrix source;                 // batch x max source length
  std::vector<Index> source_lengths;
  TokenMatrix target;                 // batch x max target length
  MaskMatrix target_mask;             // 1 on real target positions incl. EOS
  /// Per-position embedding scale for the source. Empty means all ones.
  Eigen::ArrayXXd source_scale;
  std::vector<Index> example_ids;

  Index rows() const { return source.rows(); }
  Index target_tokens() const;
};

PaddedBatch pad_batch(const std::vector<DialogueExample>& examples, const std::vector<Index>& ids);

/// Partitions examples into padded batches. The order is a seeded shuffle, or
/// corpus order when `shuffle` is false.
std::vector<PaddedBatch> make_batches(const std::vector<DialogueExample>& examples, Index batch_size,
                                      std::uint64_t shuffle_seed, bool shuffle = true);

/// Sources only; targets become a single EOS.
PaddedBatch source_batch(const std::vector<TokenSeq>& sources);

inline const std::string kDullResponse = "i do not know";

/// Writes `num_examples` unique template contexts. Each response is the dull
/// sentence with probability `dull_fraction`, otherwise the context's content
/// words. Returns the number of dull responses written.
Index generate_synthetic_corpus(Index num_examples, double dull_fraction, std::uint64_t seed,
                                const std::filesystem::path& out_path);

}  // namespace divseq
