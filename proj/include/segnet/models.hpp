#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segnet/cbam.hpp"
#include "segnet/skip_fusion.hpp"

namespace segnet {

enum class Family { unet, cnn };

/// One row of the ablation ladder.
struct ModelVariant {
  Family family = Family::unet;
  bool ave = false;
  bool cbam = false;

  friend bool operator==(const ModelVariant&, const ModelVariant&) = default;

  /// Row label as used in the ablation tables.
  std::string table_name() const {
    if (!ave && !cbam) return family == Family::unet ? "Base" : "CNN (Base)";
    if (ave && !cbam) return "Base+Ave";
    if (!ave && cbam) return "Base+CBAM";
    return "Base+Ave+CBAM";
  }

  /// CLI identifier: unet-base, unet-ave, unet-cbam, unet-full, cnn-...
  std::string id() const {
    std::string f = family == Family::unet ? "unet-" : "cnn-";
    if (!ave && !cbam) return f + "base";
    if (ave && !cbam) return f + "ave";
    if (!ave && cbam) return f + "cbam";
    return f + "full";
  }

  static ModelVariant parse(std::string_view s) {
    for (const auto& v : all()) {
      if (v.id() == s) return v;
    }
    throw std::invalid_argument("unknown model variant '" + std::string(s) +
                                "' (expected unet|cnn followed by -base, -ave, -cbam or -full)");
  }

  static std::array<ModelVariant, 8> all() {
    return {{{Family::unet, false, false},
             {Family::unet, true, false},
             {Family::unet, false, true},
             {Family::unet, true, true},
             {Family::cnn, false, false},
             {Family::cnn, true, false},
             {Family::cnn, false, true},
             {Family::cnn, true, true}}};
  }

  static std::array<ModelVariant, 4> ladder(Family family) {
    return {{{family, false, false}, {family, true, false}, {family, false, true}, {family, true, true}}};
  }
};

struct EncoderConfig {
  std::size_t depth = 4;
  std::vector<std::size_t> convs_per_block{2, 2, 2, 2};
  std::size_t base_width = 8;
  std::size_t width_cap = 8;  // widths stop doubling at width_cap * base_width
  std::size_t in_channels = 1;
  // Plain-CNN family layout.
  std::size_t cnn_blocks = 6;
  std::size_t cnn_insert_after = 3;

  /// VGG16-shaped encoder: 5 levels, [2,2,3,3,3] convolutions, 64..512 channels.
  static EncoderConfig full_scale() {
    EncoderConfig e;
    e.depth = 5;
    e.convs_per_block = {2, 2, 3, 3, 3};
    e.base_width = 64;
    e.width_cap = 8;
    return e;
  }

  std::size_t width(std::size_t level) const {
    std::size_t w = base_width;
    for (std::size_t i = 0; i < level && w < width_cap * base_width; ++i) w *= 2;
    return std::min(w, width_cap * base_width);
  }

  std::size_t convs(std::size_t level) const {
    return level < convs_per_block.size() ? convs_per_block[level] : 2;
  }

  void validate() const {
    if (depth < 2) throw std::invalid_argument("encoder depth must be at least 2");
    if (base_width == 0 || width_cap == 0 || in_channels == 0)
      throw std::invalid_argument("encoder widths must be positive");
    for (std::size_t l = 0; l < depth; ++l)
      if (convs(l) == 0) throw std::invalid_argument("every encoder level needs a convolution");
    if (cnn_blocks == 0 || cnn_insert_after == 0 || cnn_insert_after > cnn_blocks)
      throw std::invalid_argument("cnn insertion point must lie within the block stack");
  }
};

template <typename T>
struct DecoderLevel {
  Conv2d<T> conv1, conv2;
};

template <typename T>
struct SegModel {
  ModelVariant variant;
  EncoderConfig enc;
  CbamConfig cbam_cfg;
  std::size_t num_classes = 0;
  bool frozen = false;

  // U-Net family
  std::vector<std::vector<Conv2d<T>>> encoder;  // per level
  std::vector<SkipBlock<T>> skips;              // levels 0 .. depth-2
  std::vector<DecoderLevel<T>> decoder;         // indexed by level 0 .. depth-2

  // CNN family
  std::vector<Conv2d<T>> blocks;
  Conv2d<T> branch_conv1, branch_conv2, branch_fuse;
  std::optional<CbamBlock<T>> mid_attention;

  Conv2d<T> head3, head1;

  /// Backbone parameters affected by freezing.
  ParamList<T> encoder_params() const {
    ParamList<T> out;
    if (variant.family == Family::unet) {
      for (std::size_t l = 0; l < encoder.size(); ++l)
        for (std::size_t i = 0; i < encoder[l].size(); ++i)
          encoder[l][i].collect(out, "enc" + std::to_string(l) + "." + std::to_string(i));
    } else {
      for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "block" + std::to_string(i));
    }
    return out;
  }

  ParamList<T> non_encoder_params() const {
    ParamList<T> out;
    if (variant.family == Family::unet) {
      for (std::size_t l = 0; l < skips.size(); ++l) skips[l].collect(out, "skip" + std::to_string(l));
      for (std::size_t l = decoder.size(); l-- > 0;) {
        decoder[l].conv1.collect(out, "dec" + std::to_string(l) + ".conv1");
        decoder[l].conv2.collect(out, "dec" + std::to_string(l) + ".conv2");
      }
    } else {
      if (variant.ave) {
        branch_conv1.collect(out, "branch.conv1");
        branch_conv2.collect(out, "branch.conv2");
        branch_fuse.collect(out, "branch.fuse");
      }
      if (mid_attention) mid_attention->collect(out, "cbam");
    }
    head3.collect(out, "head.conv3x3");
    head1.collect(out, "head.conv1x1");
    return out;
  }

  /// All parameters in deterministic build order (checkpoint order).
  ParamList<T> params() const {
    ParamList<T> out = encoder_params();
    for (auto& p : non_encoder_params()) out.push_back(std::move(p));
    return out;
  }

  /// Parameters the optimizer may update under the current freeze state.
  ParamList<T> trainable_params() const {
    if (!frozen) return params();
    return non_encoder_params();
  }

  std::size_t decoder_output_width() const { return head3.in_channels(); }

  /// Required divisor of H and W.
  std::size_t spatial_multiple() const {
    if (variant.family == Family::unet) return std::size_t{1} << (enc.depth - 1);
    return variant.ave ? 2 : 1;
  }

  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& p : params()) out.push_back(p.tensor.data());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    auto ps = params();
    if (values.size() != ps.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (values[i].size() != ps[i].tensor.numel())
        throw std::invalid_argument("restore: size mismatch for " + ps[i].name);
      ps[i].tensor.data() = values[i];
    }
  }
};

template <typename T>
std::size_t count_params(const SegModel<T>& model) {
  return count_params(model.params());
}

template <typename T>
void set_encoder_frozen(SegModel<T>& model, bool frozen) {
  model.frozen = frozen;
}

template <typename T>
SegModel<T> build_model(const ModelVariant& variant, const EncoderConfig& enc, std::size_t num_classes,
                        std::uint64_t seed, const CbamConfig& cbam_cfg = {}) {
  if (num_classes < 2) throw std::invalid_argument("build_model: need at least 2 classes");
  enc.validate();
  Rng rng(seed);
  SegModel<T> m;
  m.variant = variant;
  m.enc = enc;
  m.cbam_cfg = cbam_cfg;
  m.num_classes = num_classes;
  const std::size_t base = enc.base_width;

  if (variant.family == Family::unet) {
    std::size_t in = enc.in_channels;
    for (std::size_t l = 0; l < enc.depth; ++l) {
      std::vector<Conv2d<T>> level;
      for (std::size_t i = 0; i < enc.convs(l); ++i) {
        level.emplace_back(in, enc.width(l), 3, rng);
        in = enc.width(l);
      }
      m.encoder.push_back(std::move(level));
    }
    const SkipMode mode{variant.ave, variant.cbam};
    for (std::size_t l = 0; l + 1 < enc.depth; ++l)
      m.skips.push_back(make_skip_block<T>(mode, enc.width(l), enc.width(l + 1), cbam_cfg, rng));
    m.decoder.resize(enc.depth - 1);
    for (std::size_t l = enc.depth - 1; l-- > 0;) {
      const std::size_t below = enc.width(l + 1);
      m.decoder[l].conv1 = Conv2d<T>(below + enc.width(l), enc.width(l), 3, rng);
      m.decoder[l].conv2 = Conv2d<T>(enc.width(l), enc.width(l), 3, rng);
    }
  } else {
    std::size_t in = enc.in_channels;
    for (std::size_t i = 0; i < enc.cnn_blocks; ++i) {
      m.blocks.emplace_back(in, base, 3, rng);
      in = base;
    }
    if (variant.ave) {
      m.branch_conv1 = Conv2d<T>(base, base, 3, rng);
      m.branch_conv2 = Conv2d<T>(base, base, 3, rng);
      m.branch_fuse = Conv2d<T>(2 * base, base, 1, rng);
    }
    if (variant.cbam) m.mid_attention = make_cbam<T>(base, cbam_cfg, rng);
  }
  m.head3 = Conv2d<T>(base, base, 3, rng);
  m.head1 = Conv2d<T>(base, num_classes, 1, rng);
  return m;
}

/// Logits N x K x H x W.
template <typename T>
Tensor<T> forward(const SegModel<T>& m, const Tensor<T>& batch) {
  const Shape s = batch.shape();
  const std::size_t mult = m.spatial_multiple();
  if (s.h % mult != 0 || s.w % mult != 0) {
    throw std::invalid_argument("forward: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                " must have height and width divisible by " + std::to_string(mult) +
                                " for " + m.variant.id() + " at depth " + std::to_string(m.enc.depth));
  }
  if (s.c != m.enc.in_channels) {
    throw std::invalid_argument("forward: input has " + std::to_string(s.c) + " channels, model expects " +
                                std::to_string(m.enc.in_channels));
  }

  Tensor<T> x = batch;
  if (m.variant.family == Family::unet) {
    std::vector<Tensor<T>> feats;
    for (std::size_t l = 0; l < m.encoder.size(); ++l) {
      if (l > 0) x = max_pool2d(x);
      for (const auto& conv : m.encoder[l]) x = relu(conv(x));
      feats.push_back(x);
    }
    for (std::size_t l = m.decoder.size(); l-- > 0;) {
      const Tensor<T> skip = skip_forward(feats[l], &feats[l + 1], m.skips[l]);
      x = concat_channels(skip, upsample2x(x, UpsampleMode::bilinear));
      x = relu(m.decoder[l].conv1(x));
      x = relu(m.decoder[l].conv2(x));
    }
  } else {
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
      x = relu(m.blocks[i](x));
      if (i + 1 == m.enc.cnn_insert_after) {
        if (m.variant.ave) {
          Tensor<T> b = relu(m.branch_conv2(relu(m.branch_conv1(avg_pool2d(x)))));
          x = m.branch_fuse(concat_channels(x, upsample2x(b, UpsampleMode::bilinear)));
        }
        if (m.mid_attention) x = cbam_forward(x, *m.mid_attention);
      }
    }
  }
  return m.head1(relu(m.head3(x)));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   char[4]  "SEGM"
//   u32      format version (1)
//   u32      family (0 unet, 1 cnn), u32 ave, u32 cbam
//   u32      depth, base_width, width_cap, in_channels, cnn_blocks, cnn_insert_after
//   u32      number of convs_per_block entries, then that many u32
//   u32      cbam reduction, cbam spatial width
//   u32      num_classes
//   u64      scalar parameter count
//   f32[]    parameters in SegModel::params() order
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint truncated at byte " + std::to_string(pos) + " reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const SegModel<T>& m) {
  std::string out = "SEGM";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, m.variant.family == Family::unet ? 0 : 1);
  detail::put_u32(out, m.variant.ave);
  detail::put_u32(out, m.variant.cbam);
  for (std::size_t v : {m.enc.depth, m.enc.base_width, m.enc.width_cap, m.enc.in_channels, m.enc.cnn_blocks,
                        m.enc.cnn_insert_after})
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  detail::put_u32(out, static_cast<std::uint32_t>(m.enc.convs_per_block.size()));
  for (std::size_t v : m.enc.convs_per_block) detail::put_u32(out, static_cast<std::uint32_t>(v));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cbam_cfg.reduction));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cbam_cfg.spatial_width));
  detail::put_u32(out, static_cast<std::uint32_t>(m.num_classes));
  const auto params = m.params();
  detail::put_u64(out, count_params(params));
  for (const auto& p : params)
    for (T v : p.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

template <typename T>
SegModel<T> deserialize_checkpoint(const std::string& buf) {
  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "SEGM") != 0) throw std::runtime_error("checkpoint: bad magic at byte 0");
  r.pos = 4;
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " at byte 4");
  ModelVariant v;
  const auto fam = r.u32("family");
  if (fam > 1) throw std::runtime_error("checkpoint: bad family at byte 8");
  v.family = fam == 0 ? Family::unet : Family::cnn;
  v.ave = r.u32("ave") != 0;
  v.cbam = r.u32("cbam") != 0;
  EncoderConfig e;
  e.depth = r.u32("depth");
  e.base_width = r.u32("base_width");
  e.width_cap = r.u32("width_cap");
  e.in_channels = r.u32("in_channels");
  e.cnn_blocks = r.u32("cnn_blocks");
  e.cnn_insert_after = r.u32("cnn_insert_after");
  const auto nconv = r.u32("convs_per_block length");
  if (nconv > 64) throw std::runtime_error("checkpoint: implausible convs_per_block length at byte " + std::to_string(r.pos - 4));
  e.convs_per_block.clear();
  for (std::uint32_t i = 0; i < nconv; ++i) e.convs_per_block.push_back(r.u32("convs_per_block"));
  CbamConfig c;
  c.reduction = r.u32("cbam reduction");
  c.spatial_width = r.u32("cbam spatial width");
  const auto k = r.u32("num_classes");
  const auto total = r.u64("parameter count");

  SegModel<T> m = build_model<T>(v, e, k, 0, c);
  auto params = m.params();
  if (count_params(params) != total)
    throw std::runtime_error("checkpoint: header declares " + std::to_string(total) + " parameters, architecture has " +
                             std::to_string(count_params(params)));
  r.need(total * 4, "parameters");
  if (r.pos + total * 4 != buf.size())
    throw std::runtime_error("checkpoint: " + std::to_string(buf.size() - r.pos - total * 4) +
                             " trailing bytes after byte " + std::to_string(r.pos + total * 4));
  for (auto& p : params)
    for (T& val : p.tensor.data()) val = static_cast<T>(std::bit_cast<float>(r.u32("parameter")));
  return m;
}

template <typename T>
void save_checkpoint(const SegModel<T>& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path);
}

template <typename T>
SegModel<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace segnet
