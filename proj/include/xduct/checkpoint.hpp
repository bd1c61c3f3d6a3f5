#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xduct/errors.hpp"
#include "xduct/model.hpp"
#include "xduct/optim.hpp"
#include "xduct/vocab.hpp"

// Checkpoint file layout (all integers little-endian):
//
//   8 bytes   magic "XDUCTCKP"
//   u32       format version
//   u64       header length H
//   H bytes   JSON header: config, vocabularies, tensor names and shapes,
//             optimizer step, epoch, dev history
//   f64 * N   parameter values in header order, then Adam first moments,
//             then Adam second moments (when present)
//   u64       FNV-1a 64 checksum of every preceding byte

namespace xduct {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_log_likelihood = 0.0;  // mean per sequence
  double dev_accuracy = 0.0;        // percent
  double lr = 0.0;
  double seconds = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  ModelConfig config;
  std::string task = "synthetic";
  std::uint64_t seed = 0;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  Vocabulary source;
  Vocabulary target;
  std::vector<NamedArray> params;
  AdamState adam;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
};

inline Checkpoint snapshot(const TransducerModel& m, const AdamState* adam = nullptr) {
  Checkpoint c;
  c.config = m.config;
  c.source_vocab = m.source_vocab;
  c.target_vocab = m.target_vocab;
  for (const auto& [name, t] : m.named_parameters()) {
    c.params.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  if (adam) c.adam = *adam;
  return c;
}

// Refuses to pair a checkpoint with a different model configuration unless
// `override_config` is set.
inline void check_compatible(const Checkpoint& c, const ModelConfig& expected, bool override_config = false) {
  if (override_config) return;
  if (c.config.arch != expected.arch) {
    throw ConfigError(std::string("checkpoint holds a '") + architecture_name(c.config.arch) +
                      "' model but '" + architecture_name(expected.arch) + "' was requested");
  }
  if (!(c.config == expected)) throw ConfigError("checkpoint configuration differs from the requested one");
}

// Copies checkpoint tensors into a model with the same registry.
inline void load_parameters(TransducerModel& m, const Checkpoint& c) {
  auto named = m.named_parameters();
  if (named.size() != c.params.size()) {
    throw FormatError("checkpoint has " + std::to_string(c.params.size()) + " tensors, model expects " +
                      std::to_string(named.size()));
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto& [name, t] = named[k];
    const NamedArray& a = c.params[k];
    if (a.name != name || a.shape != t.shape()) {
      throw FormatError("checkpoint tensor '" + a.name + "' " + shape_str(a.shape) + " does not match model tensor '" +
                        name + "' " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
}

// Rebuilds the stored model. With `expected` the caller's configuration must
// match unless overridden, in which case the caller's configuration is built
// and filled from the stored tensors.
inline TransducerModel restore_model(const Checkpoint& c, const ModelConfig* expected = nullptr,
                                     bool override_config = false) {
  ModelConfig cfg = c.config;
  if (expected) {
    check_compatible(c, *expected, override_config);
    cfg = *expected;
  }
  TransducerModel m = build_model(cfg, c.source_vocab, c.target_vocab, 0);
  load_parameters(m, c);
  return m;
}

namespace detail {

inline constexpr char kMagic[8] = {'X', 'D', 'U', 'C', 'T', 'C', 'K', 'P'};

inline std::uint64_t fnv1a64(const char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > buf.size()) throw FormatError(path + ": truncated checkpoint");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"emb_dim", c.emb_dim},       {"enc_hidden", c.enc_hidden}, {"enc_layers", c.enc_layers},
          {"dec_hidden", c.dec_hidden}, {"dec_layers", c.dec_layers}, {"out_dim", c.out_dim},
          {"dropout", c.dropout},       {"arch", architecture_name(c.arch)},
          {"reinforce", c.reinforce},   {"samples", c.samples},       {"uncontrolled", c.uncontrolled}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.emb_dim = j.at("emb_dim").get<std::size_t>();
  c.enc_hidden = j.at("enc_hidden").get<std::size_t>();
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_hidden = j.at("dec_hidden").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.out_dim = j.at("out_dim").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.arch = parse_architecture(j.at("arch").get<std::string>());
  c.reinforce = j.at("reinforce").get<bool>();
  c.samples = j.at("samples").get<std::size_t>();
  c.uncontrolled = j.at("uncontrolled").get<bool>();
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json h;
  h["config"] = detail::config_to_json(c.config);
  h["task"] = c.task;
  h["seed"] = c.seed;
  h["source_vocab"] = c.source_vocab;
  h["target_vocab"] = c.target_vocab;
  h["source_symbols"] = c.source.data_symbols();
  h["target_symbols"] = c.target.data_symbols();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& a : c.params) tensors.push_back({{"name", a.name}, {"shape", a.shape}});
  h["tensors"] = tensors;
  h["adam"] = {{"present", !c.adam.empty()},
               {"step", c.adam.step},
               {"beta1", c.adam.beta1},
               {"beta2", c.adam.beta2},
               {"eps", c.adam.eps}};
  h["epoch"] = c.epoch;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : c.history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"dev_log_likelihood", e.dev_log_likelihood},
                    {"dev_accuracy", e.dev_accuracy},
                    {"lr", e.lr},
                    {"seconds", e.seconds}});
  }
  h["history"] = hist;
  const std::string header = h.dump();

  std::string buf(detail::kMagic, sizeof detail::kMagic);
  detail::put<std::uint32_t>(buf, c.version);
  detail::put<std::uint64_t>(buf, header.size());
  buf += header;
  for (const auto& a : c.params)
    for (double v : a.values) detail::put<double>(buf, v);
  if (!c.adam.empty()) {
    if (c.adam.m.size() != c.params.size() || c.adam.v.size() != c.params.size()) {
      throw ShapeError("checkpoint: optimizer state does not match the parameter list");
    }
    for (const auto* moments : {&c.adam.m, &c.adam.v})
      for (const auto& buffer : *moments)
        for (double v : buffer) detail::put<double>(buf, v);
  }
  detail::put<std::uint64_t>(buf, detail::fnv1a64(buf.data(), buf.size()));
  return buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf, const std::string& path = "<memory>") {
  if (buf.size() < sizeof detail::kMagic + 4 + 8 + 8) throw FormatError(path + ": truncated checkpoint");
  if (std::memcmp(buf.data(), detail::kMagic, sizeof detail::kMagic) != 0) {
    throw FormatError(path + ": not a checkpoint file");
  }
  const std::size_t body = buf.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, 8);
  if (stored != detail::fnv1a64(buf.data(), body)) throw FormatError(path + ": checksum mismatch");

  std::size_t pos = sizeof detail::kMagic;
  Checkpoint c;
  c.version = detail::take<std::uint32_t>(buf, pos, path);
  if (c.version != Checkpoint::kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  const auto hlen = detail::take<std::uint64_t>(buf, pos, path);
  if (hlen > body - pos) throw FormatError(path + ": truncated checkpoint");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                              buf.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
    pos += hlen;
    c.config = detail::config_from_json(h.at("config"));
    c.task = h.at("task").get<std::string>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.source_vocab = h.at("source_vocab").get<std::size_t>();
    c.target_vocab = h.at("target_vocab").get<std::size_t>();
    c.source = Vocabulary::from_data_symbols(h.at("source_symbols").get<std::vector<std::string>>());
    c.target = Vocabulary::from_data_symbols(h.at("target_symbols").get<std::vector<std::string>>());
    for (const auto& t : h.at("tensors")) {
      c.params.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(), {}});
    }
    const auto& adam = h.at("adam");
    c.adam.step = adam.at("step").get<std::uint64_t>();
    c.adam.beta1 = adam.at("beta1").get<double>();
    c.adam.beta2 = adam.at("beta2").get<double>();
    c.adam.eps = adam.at("eps").get<double>();
    c.epoch = h.at("epoch").get<std::size_t>();
    for (const auto& e : h.at("history")) {
      c.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                           e.at("dev_log_likelihood").get<double>(), e.at("dev_accuracy").get<double>(),
                           e.at("lr").get<double>(), e.at("seconds").get<double>()});
    }
    if (adam.at("present").get<bool>()) {
      for (const auto& a : c.params) {
        c.adam.m.emplace_back(shape_numel(a.shape));
        c.adam.v.emplace_back(shape_numel(a.shape));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  } catch (const Error& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  auto read_values = [&](std::vector<double>& out, std::size_t n) {
    if (n > (body - pos) / 8) throw FormatError(path + ": truncated checkpoint");
    out.resize(n);
    std::memcpy(out.data(), buf.data() + pos, n * 8);
    pos += n * 8;
  };
  for (auto& a : c.params) read_values(a.values, shape_numel(a.shape));
  for (auto& m : c.adam.m) read_values(m, m.size());
  for (auto& v : c.adam.v) read_values(v, v.size());
  if (pos != body) throw FormatError(path + ": " + std::to_string(body - pos) + " unexpected trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string buf = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf, path);
}

}  // namespace xduct
