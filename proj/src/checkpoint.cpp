// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace divseq {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'Q', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

using json = nlohmann::ordered_json;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw CheckpointError("truncated parameter archive");
  return value;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

json vector_json(const Vector<double>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector<double> json_vector(const json& j) {
  auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector<double>>(values.data(), static_cast<Index>(values.size()));
}

json tracker_json(const AvgOutTracker<double>& t) {
  json j;
  j["gamma"] = t.gamma();
  j["update_count"] = t.update_count();
  j["distribution"] = vector_json(t.distribution());
  j["support"] = vector_json(t.support());
  return j;
}

AvgOutTracker<double> json_tracker(const json& j) {
  return AvgOutTracker<double>::from_state(json_vector(j.at("distribution")), json_vector(j.at("support")),
                                           j.at("gamma").get<double>(), j.at("update_count").get<Index>());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("malformed " + path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_parameters(const Seq2SeqParams<double>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  std::uint32_t count = 0;
  params.for_each([&](const std::string&, const auto&) { ++count; });
  put<std::uint32_t>(out, count);
  params.for_each([&](const std::string& name, const auto& t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::int64_t>(out, t.rows());
    put<std::int64_t>(out, t.cols());
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!out) throw CheckpointError("failed writing " + path.string());
}

void read_parameters(Seq2SeqParams<double>& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(path.string() + " is not a parameter archive");
  if (get<std::uint32_t>(in) != kFormatVersion) throw CheckpointError("unsupported parameter archive version");
  const auto count = get<std::uint32_t>(in);
  std::uint32_t seen = 0;
  params.for_each([&](const std::string& name, auto& t) {
    if (seen++ >= count) throw CheckpointError("parameter archive has too few tensors");
    std::string stored(get<std::uint32_t>(in), '\0');
    in.read(stored.data(), static_cast<std::streamsize>(stored.size()));
    const auto rows = get<std::int64_t>(in), cols = get<std::int64_t>(in);
    if (stored != name || rows != t.rows() || cols != t.cols())
      throw CheckpointError("parameter archive tensor " + stored + " does not match " + name);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated parameter archive");
  });
  if (seen != count) throw CheckpointError("parameter archive has extra tensors");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& s = ckpt.state;
  json m;
  m["format"] = "divseq-checkpoint-1";
  m["model"] = {{"vocab_size", ckpt.model.vocab_size},       {"embedding_dim", ckpt.model.embedding_dim},
                {"encoder_hidden", ckpt.model.encoder_hidden}, {"decoder_hidden", ckpt.model.decoder_hidden},
                {"attention_dim", ckpt.model.attention_dim},   {"diversity_label", ckpt.model.diversity_label}};
  m["train_config"] = to_text(ckpt.train);
  m["vocabulary_hash"] = hex64(ckpt.vocab.hash());
  m["step"] = s.step;
  m["optimizer_steps"] = s.optimizer.steps;
  m["avgout"] = tracker_json(s.tracker);
  m["reward_baseline"] = {{"value", s.baseline.value()},
                          {"decay", s.baseline.decay()},
                          {"update_count", s.baseline.update_count()}};
  m["skipped_samples"] = s.skipped_samples;
  if (s.best_eval) m["best_eval"] = {{"step", s.best_eval->step}, {"dev_ml", s.best_eval->dev_ml}};

  write_text(dir / "manifest.json", m.dump(2) + "\n");
  write_parameters(s.params, dir / "params.bin");
  write_parameters(s.optimizer.first_moment, dir / "optimizer_m.bin");
  write_parameters(s.optimizer.second_moment, dir / "optimizer_v.bin");
  ckpt.vocab.save(dir / "vocab.txt");
  write_avgout_json(s.tracker, ckpt.vocab, dir / "avgout.json");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto m = read_json(dir / "manifest.json");
  try {
    if (m.at("format").get<std::string>() != "divseq-checkpoint-1") throw CheckpointError("unknown checkpoint format");
    Checkpoint ckpt;
    const auto& mc = m.at("model");
    ckpt.model.vocab_size = mc.at("vocab_size").get<Index>();
    ckpt.model.embedding_dim = mc.at("embedding_dim").get<Index>();
    ckpt.model.encoder_hidden = mc.at("encoder_hidden").get<Index>();
    ckpt.model.decoder_hidden = mc.at("decoder_hidden").get<Index>();
    ckpt.model.attention_dim = mc.at("attention_dim").get<Index>();
    ckpt.model.diversity_label = mc.at("diversity_label").get<bool>();
    ckpt.train = parse_train_config(m.at("train_config").get<std::string>());
    ckpt.vocab = Vocabulary::load(dir / "vocab.txt");
    if (hex64(ckpt.vocab.hash()) != m.at("vocabulary_hash").get<std::string>())
      throw CheckpointError("vocabulary does not match the checkpoint manifest");
    if (ckpt.vocab.size() != ckpt.model.vocab_size) throw CheckpointError("vocabulary size does not match the model");

    auto& s = ckpt.state;
    s.params = Seq2SeqParams<double>::zeros(ckpt.model);
    read_parameters(s.params, dir / "params.bin");
    s.optimizer = AdamState<double>::zeros_like(s.params);
    read_parameters(s.optimizer.first_moment, dir / "optimizer_m.bin");
    read_parameters(s.optimizer.second_moment, dir / "optimizer_v.bin");
    s.optimizer.steps = m.at("optimizer_steps").get<Index>();
    s.step = m.at("step").get<Index>();
    s.tracker = json_tracker(m.at("avgout"));
    const auto& rb = m.at("reward_baseline");
    s.baseline = RewardBaseline<double>::from_state(rb.at("value").get<double>(), rb.at("decay").get<double>(),
                                                    rb.at("update_count").get<Index>());
    s.skipped_samples = m.at("skipped_samples").get<Index>();
    if (m.contains("best_eval"))
      s.best_eval = BestEval{m["best_eval"].at("step").get<Index>(), m["best_eval"].at("dev_ml").get<double>()};
    return ckpt;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

void write_avgout_json(const AvgOutTracker<double>& tracker, const Vocabulary& vocab,
                       const std::filesystem::path& path) {
  if (tracker.size() != vocab.size()) throw CheckpointError("tracker and vocabulary sizes differ");
  json j = tracker_json(tracker);
  j["tokens"] = vocab.tokens();
  write_text(path, j.dump(2) + "\n");
}

AvgOutExport read_avgout_json(const std::filesystem::path& path) {
  auto j = read_json(path);
  try {
    AvgOutExport out{json_tracker(j), j.at("tokens").get<std::vector<std::string>>()};
    if (static_cast<Index>(out.tokens.size()) != out.tracker.size())
      throw CheckpointError("avgout export has mismatched token and distribution lengths");
    return out;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed avgout export: ") + e.what());
  }
}

}  // namespace divseq
