#include "rankuda/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<double> fan_in_uniform(Rng& rng, std::size_t n, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

Parameter make_param(std::string name, ad::Shape shape, std::vector<double> value,
                     bool nonneg = false) {
  Parameter p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.value = std::move(value);
  p.m.assign(p.value.size(), 0.0);
  p.v.assign(p.value.size(), 0.0);
  p.nonneg = nonneg;
  return p;
}

}  // namespace

int EncoderConfig::scaled(int base) const {
  const int v = static_cast<int>(std::lround(base * scale_factor));
  return std::max(v, 2);
}

std::array<int, 7> EncoderConfig::conv_channels() const {
  std::array<int, 7> out{};
  for (std::size_t i = 0; i < kBaseChannels.size(); ++i) out[i] = scaled(kBaseChannels[i]);
  return out;
}

void EncoderConfig::validate() const {
  if (input_size < 8) fail("encoder: input_size must be at least 8");
  if (scale_factor <= 0.0) fail("encoder: scale_factor must be positive");
  if (feature_dim() < 2) fail("encoder: feature dimension must be at least 2");
}

Parameter& ModelState::param(std::string_view name) {
  for (auto& p : params) {
    if (p.name == name) return p;
  }
  fail("model: no parameter named '" + std::string(name) + "'");
}

const Parameter& ModelState::param(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  fail("model: no parameter named '" + std::string(name) + "'");
}

bool ModelState::has_param(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return true;
  }
  return false;
}

std::vector<std::string> ModelState::encoder_param_names() const {
  std::vector<std::string> out;
  for (const auto& p : params) {
    if (p.name.rfind("conv", 0) == 0 || p.name.rfind("bn", 0) == 0 ||
        p.name.rfind("fc", 0) == 0) {
      out.push_back(p.name);
    }
  }
  return out;
}

std::vector<std::string> ModelState::ranking_param_names() const {
  std::vector<std::string> out = encoder_param_names();
  for (const char* n : {"sreg_w", "sreg_b", "cls_w", "cls_b", "center0", "center1"}) {
    out.emplace_back(n);
  }
  return out;
}

std::vector<std::string> ModelState::regression_param_names() const {
  return {"treg1_w", "treg1_b", "treg2_w", "treg2_b"};
}

ModelState init_model(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelState s;
  s.cfg = cfg;
  const auto ch = cfg.conv_channels();
  int cin = 3;
  for (int l = 0; l < 7; ++l) {
    const int cout = ch[static_cast<std::size_t>(l)];
    const int fan_in = cin * 9;
    s.params.push_back(make_param(
        "conv" + std::to_string(l + 1) + "_w", {cout, cin, 3, 3},
        fan_in_uniform(rng, static_cast<std::size_t>(cout) * cin * 9, fan_in)));
    if (l == 6) {
      // Only the last conv carries a bias; the others are followed by BN.
      s.params.push_back(make_param("conv7_b", {cout},
                                    std::vector<double>(static_cast<std::size_t>(cout), 0.0)));
    } else {
      s.params.push_back(make_param(
          "bn" + std::to_string(l + 1) + "_g", {cout},
          std::vector<double>(static_cast<std::size_t>(cout), 1.0)));
      s.params.push_back(make_param(
          "bn" + std::to_string(l + 1) + "_b", {cout},
          std::vector<double>(static_cast<std::size_t>(cout), 0.0)));
      ad::BatchNormBuffer buf;
      buf.init(cout);
      s.bn.push_back(std::move(buf));
    }
    cin = cout;
  }
  const int gap_dim = ch[6];
  const int hid = cfg.fc_hidden();
  const int d = cfg.feature_dim();
  s.params.push_back(make_param("fc1_w", {gap_dim, hid},
                                fan_in_uniform(rng, static_cast<std::size_t>(gap_dim) * hid, gap_dim)));
  s.params.push_back(make_param("fc1_b", {hid}, std::vector<double>(static_cast<std::size_t>(hid), 0.0)));
  s.params.push_back(make_param("fc2_w", {hid, hid},
                                fan_in_uniform(rng, static_cast<std::size_t>(hid) * hid, hid)));
  s.params.push_back(make_param("fc2_b", {hid}, std::vector<double>(static_cast<std::size_t>(hid), 0.0)));
  s.params.push_back(make_param("fc3_w", {hid, d},
                                fan_in_uniform(rng, static_cast<std::size_t>(hid) * d, hid)));
  s.params.push_back(make_param("fc3_b", {d}, std::vector<double>(static_cast<std::size_t>(d), 0.0)));

  // Source regression head, constrained nonnegative.
  std::vector<double> wreg(static_cast<std::size_t>(d));
  const double wb = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : wreg) x = rng.uniform(0.0, wb);
  s.params.push_back(make_param("sreg_w", {d, 1}, std::move(wreg), /*nonneg=*/true));
  s.params.push_back(make_param("sreg_b", {1}, {0.0}, /*nonneg=*/true));

  // Rank classifier head.
  s.params.push_back(make_param("cls_w", {d, 2},
                                fan_in_uniform(rng, static_cast<std::size_t>(d) * 2, d)));
  s.params.push_back(make_param("cls_b", {2}, {0.0, 0.0}));

  // Target regression head.
  const int th = cfg.target_hidden();
  s.params.push_back(make_param("treg1_w", {d, th},
                                fan_in_uniform(rng, static_cast<std::size_t>(d) * th, d)));
  s.params.push_back(make_param("treg1_b", {th}, std::vector<double>(static_cast<std::size_t>(th), 0.0)));
  s.params.push_back(make_param("treg2_w", {th, 1},
                                fan_in_uniform(rng, static_cast<std::size_t>(th), th)));
  s.params.push_back(make_param("treg2_b", {1}, {0.0}));

  // Class centers for the ranking feature.
  std::vector<double> c0(static_cast<std::size_t>(d)), c1(static_cast<std::size_t>(d));
  for (double& x : c0) x = rng.uniform(-0.1, 0.1);
  for (double& x : c1) x = rng.uniform(-0.1, 0.1);
  s.params.push_back(make_param("center0", {d}, std::move(c0)));
  s.params.push_back(make_param("center1", {d}, std::move(c1)));
  return s;
}

const ad::Tensor& BoundModel::operator[](std::string_view name) const {
  const auto it = leaves.find(name);
  if (it == leaves.end()) fail("model: parameter '" + std::string(name) + "' not bound");
  return it->second;
}

BoundModel bind_model(ad::Tape& tape, ModelState& state, Mode mode,
                      std::span<const std::string> trainable) {
  BoundModel m;
  m.tape = &tape;
  m.state = &state;
  m.mode = mode;
  for (auto& p : state.params) {
    const bool rg =
        std::find(trainable.begin(), trainable.end(), p.name) != trainable.end();
    m.leaves.emplace(p.name, tape.leaf(p.shape, p.value, rg));
  }
  return m;
}

BoundModel bind_model(ad::Tape& tape, ModelState& state, Mode mode) {
  return bind_model(tape, state, mode, {});
}

ad::Tensor encode_batch(const BoundModel& m, std::span<const Image* const> images) {
  if (images.empty()) fail("encode: empty image batch");
  const EncoderConfig& cfg = m.state->cfg;
  const int sz = cfg.input_size;
  const int batch = static_cast<int>(images.size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(batch) * 3 * sz * sz);
  for (const Image* im : images) {
    if (im->channels != 3) {
      fail("encode: expected 3 channels, got " + std::to_string(im->channels));
    }
    if (im->width != sz || im->height != sz) {
      fail("encode: expected " + std::to_string(sz) + "x" + std::to_string(sz) +
           " input, got " + std::to_string(im->width) + "x" + std::to_string(im->height));
    }
    for (double v : im->pix) {
      if (!std::isfinite(v)) fail("encode: non-finite pixel value");
    }
    data.insert(data.end(), im->pix.begin(), im->pix.end());
  }
  ad::Tape& t = *m.tape;
  ad::Tensor x = t.leaf({batch, 3, sz, sz}, std::move(data));
  const bool training = m.mode == Mode::kTrain;
  for (int l = 0; l < 7; ++l) {
    const std::string idx = std::to_string(l + 1);
    if (l == 6) {
      x = ad::conv2d(x, m["conv7_w"], m["conv7_b"], EncoderConfig::kStrides[6], 1);
    } else {
      x = ad::conv2d(x, m["conv" + idx + "_w"], std::nullopt,
                     EncoderConfig::kStrides[static_cast<std::size_t>(l)], 1);
      x = ad::batch_norm(x, m["bn" + idx + "_g"], m["bn" + idx + "_b"],
                         m.state->bn[static_cast<std::size_t>(l)], training);
      x = ad::relu(x);
    }
  }
  x = ad::global_avg_pool(x);
  x = ad::relu(ad::add_rowvec(ad::matmul(x, m["fc1_w"]), m["fc1_b"]));
  x = ad::relu(ad::add_rowvec(ad::matmul(x, m["fc2_w"]), m["fc2_b"]));
  x = ad::add_rowvec(ad::matmul(x, m["fc3_w"]), m["fc3_b"]);
  return x;
}

ad::Tensor regress_source(const BoundModel& m, const ad::Tensor& features) {
  const auto w = m["sreg_w"].value();
  for (double x : w) {
    if (x < 0.0) fail("regress_source: negative weight detected (projection contract violated)");
  }
  const auto b = m["sreg_b"].value();
  if (b[0] < 0.0) fail("regress_source: negative bias detected (projection contract violated)");
  return ad::add_rowvec(ad::matmul(features, m["sreg_w"]), m["sreg_b"]);
}

ad::Tensor rank_feature(const ad::Tensor& fa, const ad::Tensor& fb) {
  if (fa.shape() != fb.shape()) {
    fail("rank_feature: dimension mismatch between " + ad::shape_str(fa.shape()) +
         " and " + ad::shape_str(fb.shape()));
  }
  return ad::sub(fa, fb);
}

ad::Tensor classify_rank(const BoundModel& m, const ad::Tensor& rank_features) {
  ad::Tensor logits = ad::add_rowvec(ad::matmul(rank_features, m["cls_w"]), m["cls_b"]);
  for (double v : logits.value()) {
    if (!std::isfinite(v)) fail("classify_rank: non-finite logits");
  }
  ad::Tensor probs = ad::softmax(logits);
  // Class 1 = first image has better quality.
  return ad::slice(probs, 1, 1, 2);
}

ad::Tensor regress_target(const BoundModel& m, const ad::Tensor& features) {
  ad::Tensor h = ad::relu(ad::add_rowvec(ad::matmul(features, m["treg1_w"]), m["treg1_b"]));
  return ad::add_rowvec(ad::matmul(h, m["treg2_w"]), m["treg2_b"]);
}

std::vector<double> encode_eval(const Image& image, ModelState& state) {
  ad::Tape tape;
  BoundModel m = bind_model(tape, state, Mode::kEval);
  const Image* p = &image;
  ad::Tensor f = encode_batch(m, std::span<const Image* const>(&p, 1));
  return std::vector<double>(f.value().begin(), f.value().end());
}

double regress_target_eval(std::span<const double> feature, ModelState& state) {
  ad::Tape tape;
  BoundModel m = bind_model(tape, state, Mode::kEval);
  ad::Tensor f = tape.leaf({1, static_cast<int>(feature.size())},
                           std::vector<double>(feature.begin(), feature.end()));
  return regress_target(m, f).value()[0];
}

double classify_rank_eval(std::span<const double> feature_a,
                          std::span<const double> feature_b, ModelState& state) {
  ad::Tape tape;
  BoundModel m = bind_model(tape, state, Mode::kEval);
  const int d = static_cast<int>(feature_a.size());
  ad::Tensor fa = tape.leaf({1, d}, std::vector<double>(feature_a.begin(), feature_a.end()));
  ad::Tensor fb = tape.leaf({1, d}, std::vector<double>(feature_b.begin(), feature_b.end()));
  return classify_rank(m, rank_feature(fa, fb)).value()[0];
}

namespace {

constexpr const char* kCkptMagic = "rankuda-ckpt";
constexpr int kCkptVersion = 1;

std::string hexf(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

void write_array(std::ofstream& out, const char* kind, const std::string& name,
                 const ad::Shape& shape, std::span<const double> values) {
  out << kind << " " << name << " " << shape.size();
  for (int d : shape) out << " " << d;
  out << "\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << (i ? " " : "") << hexf(values[i]);
  }
  out << "\n";
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) fail("checkpoint: cannot write " + file.string());
  out << kCkptMagic << " " << kCkptVersion << "\n";
  out << "input_size " << state.cfg.input_size << "\n";
  out << "scale_factor " << hexf(state.cfg.scale_factor) << "\n";
  for (const auto& p : state.params) {
    write_array(out, "param", p.name, p.shape, p.value);
  }
  for (std::size_t i = 0; i < state.bn.size(); ++i) {
    const std::string idx = std::to_string(i + 1);
    const int ch = static_cast<int>(state.bn[i].running_mean.size());
    write_array(out, "buffer", "bn" + idx + "_rm", {ch}, state.bn[i].running_mean);
    write_array(out, "buffer", "bn" + idx + "_rv", {ch}, state.bn[i].running_var);
  }
  out << "end\n";
  if (!out) fail("checkpoint: write failed for " + file.string());
}

ModelState load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail("checkpoint: cannot open " + file.string());
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kCkptMagic || version != kCkptVersion) {
    fail("checkpoint " + file.string() + ": unsupported format");
  }
  EncoderConfig cfg;
  std::string key;
  in >> key >> cfg.input_size;
  if (key != "input_size") fail("checkpoint: expected input_size");
  std::string sf;
  in >> key >> sf;
  if (key != "scale_factor") fail("checkpoint: expected scale_factor");
  cfg.scale_factor = std::strtod(sf.c_str(), nullptr);

  // Build the skeleton with a throwaway seed, then overwrite every array.
  Rng rng(1);
  ModelState state = init_model(cfg, rng);
  std::size_t filled = 0;
  std::size_t buffers_filled = 0;
  while (in >> key) {
    if (key == "end") break;
    if (key != "param" && key != "buffer") fail("checkpoint: unexpected token '" + key + "'");
    std::string name;
    std::size_t ndims = 0;
    in >> name >> ndims;
    ad::Shape shape(ndims);
    for (auto& d : shape) in >> d;
    const std::size_t n = ad::numel(shape);
    std::vector<double> values(n);
    for (auto& v : values) {
      std::string tok;
      if (!(in >> tok)) fail("checkpoint: truncated values for " + name);
      char* endp = nullptr;
      v = std::strtod(tok.c_str(), &endp);
      if (endp == tok.c_str()) fail("checkpoint: bad value '" + tok + "' in " + name);
    }
    if (key == "param") {
      Parameter& p = state.param(name);
      if (p.shape != shape) {
        fail("checkpoint: shape mismatch for " + name + ": file has " +
             ad::shape_str(shape) + ", model has " + ad::shape_str(p.shape));
      }
      p.value = std::move(values);
      ++filled;
    } else {
      const bool is_mean = name.size() > 3 && name.substr(name.size() - 3) == "_rm";
      const bool is_var = name.size() > 3 && name.substr(name.size() - 3) == "_rv";
      if ((!is_mean && !is_var) || name.rfind("bn", 0) != 0) {
        fail("checkpoint: unknown buffer '" + name + "'");
      }
      const std::size_t idx =
          static_cast<std::size_t>(std::stoi(name.substr(2, name.size() - 5))) - 1;
      if (idx >= state.bn.size() || values.size() != state.bn[idx].running_mean.size()) {
        fail("checkpoint: buffer '" + name + "' does not match the model");
      }
      (is_mean ? state.bn[idx].running_mean : state.bn[idx].running_var) = std::move(values);
      ++buffers_filled;
    }
  }
  if (key != "end") fail("checkpoint: missing end marker in " + file.string());
  if (filled != state.params.size() || buffers_filled != 2 * state.bn.size()) {
    fail("checkpoint " + file.string() + ": incomplete parameter set");
  }
  return state;
}

}  // namespace rankuda
