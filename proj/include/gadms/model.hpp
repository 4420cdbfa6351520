#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadms/decoder.hpp"
#include "gadms/encoder.hpp"
#include "gadms/gass.hpp"

namespace gadms {

using json = nlohmann::json;

inline void to_json(json& j, const SpecialIds& s) {
  j = json{{"pad", s.pad}, {"sos", s.sos}, {"eos", s.eos}, {"mask", s.mask}};
}
inline void from_json(const json& j, SpecialIds& s) {
  j.at("pad").get_to(s.pad);
  j.at("sos").get_to(s.sos);
  j.at("eos").get_to(s.eos);
  j.at("mask").get_to(s.mask);
}

inline void to_json(json& j, const EncoderConfig& c) {
  j = json{{"text_depth", c.text_depth},
           {"image_depth", c.image_depth},
           {"width", c.width},
           {"heads", c.heads},
           {"vocab_size", c.vocab_size},
           {"max_text_len", c.max_text_len},
           {"grid_rows", c.grid_rows},
           {"grid_cols", c.grid_cols},
           {"patch_channels", c.patch_channels},
           {"mlp_ratio", c.mlp_ratio},
           {"special", c.special}};
}
inline void from_json(const json& j, EncoderConfig& c) {
  j.at("text_depth").get_to(c.text_depth);
  j.at("image_depth").get_to(c.image_depth);
  j.at("width").get_to(c.width);
  j.at("heads").get_to(c.heads);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_text_len").get_to(c.max_text_len);
  j.at("grid_rows").get_to(c.grid_rows);
  j.at("grid_cols").get_to(c.grid_cols);
  j.at("patch_channels").get_to(c.patch_channels);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("special").get_to(c.special);
}

inline void to_json(json& j, const DecoderConfig& c) {
  j = json{{"depth", c.depth}};
}
inline void from_json(const json& j, DecoderConfig& c) {
  j.at("depth").get_to(c.depth);
}

inline void to_json(json& j, const GassConfig& c) {
  j = json{{"layers", c.layers}, {"scales", c.scales}};
}
inline void from_json(const json& j, GassConfig& c) {
  j.at("layers").get_to(c.layers);
  j.at("scales").get_to(c.scales);
}

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  GassConfig gass;

  void validate() const {
    encoder.validate();
    decoder.validate();
    gass.resolve_layer_count(encoder.text_depth);
  }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"encoder", c.encoder}, {"decoder", c.decoder}, {"gass", c.gass}};
}
inline void from_json(const json& j, ModelConfig& c) {
  j.at("encoder").get_to(c.encoder);
  j.at("decoder").get_to(c.decoder);
  j.at("gass").get_to(c.gass);
}

// The dual encoder plus reconstruction head, with every trainable tensor
// registered under a stable name.
class Model {
 public:
  ModelConfig cfg;
  TextEncoder text;
  ImageEncoder image;
  CrossModalDecoder decoder;
  ParamRegistry params;

  void init(const ModelConfig& config, std::uint64_t seed) {
    cfg = config;
    cfg.validate();
    Rng rng = derive_stream(seed, Stream::Init, {});
    text.init(cfg.encoder, rng);
    image.init(cfg.encoder, rng);
    decoder.init(cfg.encoder, cfg.decoder, rng);
    params = ParamRegistry();  // re-init must not stack registrations
    text.reg(params, "text");
    image.reg(params, "image");
    decoder.reg(params, "decoder");
  }
};

// First/second-moment accumulators for the optimizer, shaped like the
// registry and serialized alongside the weights.
struct AdamState {
  std::vector<Mat> m, v;
  std::int64_t step = 0;

  void init(const ParamRegistry& reg) {
    m.resize(reg.size());
    v.resize(reg.size());
    for (std::size_t i = 0; i < reg.size(); ++i) {
      const Mat& p = reg.value(static_cast<int>(i));
      m[i] = Mat::Zero(p.rows(), p.cols());
      v[i] = Mat::Zero(p.rows(), p.cols());
    }
    step = 0;
  }
};

struct TrainProgress {
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
};

namespace detail {

inline void write_block(std::ofstream& os, const Mat& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) *
                                        static_cast<std::size_t>(m.size())));
}

inline void read_block(std::ifstream& is, Mat& m) {
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) *
                                       static_cast<std::size_t>(m.size())));
  check(is.good(), ErrorKind::Integrity, "checkpoint blob truncated");
}

}  // namespace detail

constexpr int kCheckpointFormat = 1;

// Writes manifest.json + params.bin into `dir`. The binary holds the raw
// doubles of every parameter in registry order, followed by the optimizer
// moments in the same order when present.
inline void save_checkpoint(const std::string& dir, const Model& model,
                            const TrainProgress& prog,
                            const AdamState* adam = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  check(!ec, ErrorKind::Io, "cannot create checkpoint directory " + dir);

  json manifest;
  manifest["format_version"] = kCheckpointFormat;
  manifest["model"] = model.cfg;
  manifest["step"] = prog.step;
  manifest["epoch"] = prog.epoch;
  manifest["seed"] = prog.seed;
  manifest["has_optimizer"] = adam != nullptr;
  if (adam) manifest["adam_step"] = adam->step;
  json plist = json::array();
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Mat& p = model.params.value(static_cast<int>(i));
    plist.push_back(json{{"name", model.params.name(static_cast<int>(i))},
                         {"rows", p.rows()},
                         {"cols", p.cols()},
                         {"offset", offset}});
    offset += p.size();
  }
  manifest["params"] = plist;
  manifest["total_scalars"] = offset;

  {
    std::ofstream os(fs::path(dir) / "manifest.json");
    check(os.good(), ErrorKind::Io, "cannot write checkpoint manifest");
    os << manifest.dump(2) << "\n";
  }
  std::ofstream os(fs::path(dir) / "params.bin", std::ios::binary);
  check(os.good(), ErrorKind::Io, "cannot write checkpoint blob");
  for (std::size_t i = 0; i < model.params.size(); ++i)
    detail::write_block(os, model.params.value(static_cast<int>(i)));
  if (adam) {
    check(adam->m.size() == model.params.size() &&
              adam->v.size() == model.params.size(),
          ErrorKind::Contract, "optimizer state does not match the registry");
    for (const Mat& m : adam->m) detail::write_block(os, m);
    for (const Mat& v : adam->v) detail::write_block(os, v);
  }
  check(os.good(), ErrorKind::Io, "checkpoint blob write failed");
}

// Rebuilds the model (and optimizer state, if stored and requested) from a
// checkpoint directory. The model is re-initialized from the stored config
// and seed, then every tensor is overwritten from the blob.
inline TrainProgress load_checkpoint(const std::string& dir, Model& model,
                                     AdamState* adam = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream ms(fs::path(dir) / "manifest.json");
  check(ms.good(), ErrorKind::Io, "cannot open checkpoint manifest in " + dir);
  json manifest;
  try {
    ms >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorKind::Integrity, std::string("bad checkpoint manifest: ") + e.what());
  }
  check(manifest.value("format_version", -1) == kCheckpointFormat,
        ErrorKind::Compatibility, "unsupported checkpoint format version");

  TrainProgress prog;
  prog.step = manifest.at("step").get<std::int64_t>();
  prog.epoch = manifest.at("epoch").get<int>();
  prog.seed = manifest.at("seed").get<std::uint64_t>();
  model.init(manifest.at("model").get<ModelConfig>(), prog.seed);

  const json& plist = manifest.at("params");
  check(plist.size() == model.params.size(), ErrorKind::Compatibility,
        "checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < plist.size(); ++i) {
    const json& e = plist[i];
    const int id = static_cast<int>(i);
    check(e.at("name").get<std::string>() == model.params.name(id),
          ErrorKind::Compatibility, "checkpoint parameter order mismatch");
    const Mat& p = model.params.value(id);
    check(e.at("rows").get<Eigen::Index>() == p.rows() &&
              e.at("cols").get<Eigen::Index>() == p.cols(),
          ErrorKind::Compatibility, "checkpoint parameter shape mismatch");
  }

  std::ifstream is(fs::path(dir) / "params.bin", std::ios::binary);
  check(is.good(), ErrorKind::Io, "cannot open checkpoint blob in " + dir);
  for (std::size_t i = 0; i < model.params.size(); ++i)
    detail::read_block(is, model.params.value(static_cast<int>(i)));
  if (adam) {
    check(manifest.value("has_optimizer", false), ErrorKind::Compatibility,
          "checkpoint has no optimizer state to resume from");
    adam->init(model.params);
    adam->step = manifest.at("adam_step").get<std::int64_t>();
    for (Mat& m : adam->m) detail::read_block(is, m);
    for (Mat& v : adam->v) detail::read_block(is, v);
  }
  return prog;
}

}  // namespace gadms
