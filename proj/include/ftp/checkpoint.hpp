// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files: tensor records back to back, then a JSON manifest,
// then the manifest length (u64 LE) and the trailer magic "FTPJ".
#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "json.hpp"

#include "ftp/routing.hpp"

namespace ftp {

inline constexpr char kManifestTrailer[4] = {'F', 'T', 'P', 'J'};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  base.n_blocks = j.value("n_blocks", base.n_blocks);
  base.d_model = j.value("d_model", base.d_model);
  base.n_heads = j.value("n_heads", base.n_heads);
  base.d_ff = j.value("d_ff", base.d_ff);
  base.vocab_size = j.value("vocab_size", base.vocab_size);
  base.max_seq_len = j.value("max_seq_len", base.max_seq_len);
  return base;
}

namespace detail {

inline std::string checkpoint_bytes(const std::vector<NamedTensor>& tensors, nlohmann::json manifest) {
  std::ostringstream os(std::ios::binary);
  auto& list = manifest["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors) {
    list.push_back({{"name", nt.name}, {"role", nt.role}, {"shape", nt.tensor.shape()}});
    write_tensor(os, nt.tensor);
  }
  const auto text = manifest.dump(2);
  os << text;
  write_le<std::uint64_t>(os, text.size());
  os.write(kManifestTrailer, 4);
  return os.str();
}

struct LoadedCheckpoint {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(bytes.size() - 4, 4, kManifestTrailer, 4) != 0) {
    throw IoError("not a checkpoint file (missing trailer)");
  }
  std::istringstream tail(bytes.substr(bytes.size() - 12, 8));
  const auto len = read_le<std::uint64_t>(tail);
  if (len > bytes.size() - 12) throw IoError("checkpoint manifest length out of range");
  const auto manifest_start = bytes.size() - 12 - len;
  LoadedCheckpoint out;
  try {
    out.manifest = nlohmann::json::parse(bytes.substr(manifest_start, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  std::istringstream body(bytes.substr(0, manifest_start));
  for (const auto& entry : out.manifest.at("tensors")) {
    auto t = read_tensor(body);
    if (t.shape() != entry.at("shape").get<Shape>()) throw IoError("checkpoint tensor shape disagrees with manifest");
    out.tensors.push_back({entry.at("name").get<std::string>(), entry.at("role").get<std::string>(), t});
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("cannot write " + path.string());
  }
}

inline void assign_tensors(const std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
  if (dst.size() != src.size()) throw IoError("checkpoint tensor count does not match model");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw IoError("checkpoint tensor " + src[i].name + " does not match expected " + dst[i].name);
    }
    Tensor d = dst[i].tensor;
    auto v = src[i].tensor.values();
    std::copy(v.begin(), v.end(), d.data().begin());
  }
}

}  // namespace detail

inline std::string serialize_model(const ModelWeights& w) {
  return detail::checkpoint_bytes(w.named_tensors(), {{"kind", "model"}, {"config", to_json(w.config)}});
}

inline void save_model(const std::filesystem::path& path, const ModelWeights& w) {
  detail::write_file(path, serialize_model(w));
}

inline ModelWeights load_model(const std::filesystem::path& path) {
  auto ck = detail::parse_checkpoint(detail::read_file(path));
  if (ck.manifest.value("kind", "") != "model") throw IoError("checkpoint is not a model: " + path.string());
  const auto cfg = model_config_from_json(ck.manifest.at("config"));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint has invalid config: ") + e.what());
  }
  auto w = init_weights(cfg, 0);
  detail::assign_tensors(w.named_tensors(), ck.tensors);
  return w;
}

inline std::string serialize_router(const DynamicRouterWeights& w) {
  return detail::checkpoint_bytes(
      w.named_tensors(),
      {{"kind", "router"},
       {"factor_order", {"p", "s_a", "r_a", "s_r"}},
       {"hidden", kRouterHidden},
       {"activation", "silu"}});
}

inline void save_router(const std::filesystem::path& path, const DynamicRouterWeights& w) {
  detail::write_file(path, serialize_router(w));
}

inline DynamicRouterWeights load_router(const std::filesystem::path& path) {
  auto ck = detail::parse_checkpoint(detail::read_file(path));
  if (ck.manifest.value("kind", "") != "router") throw IoError("checkpoint is not a router: " + path.string());
  auto w = DynamicRouterWeights::zeros();
  detail::assign_tensors(w.named_tensors(), ck.tensors);
  return w;
}

inline std::string file_hash(const std::filesystem::path& path) { return hex64(fnv1a64(detail::read_file(path))); }

}  // namespace ftp
