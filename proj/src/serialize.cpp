#include "dfternet/serialize.hpp"

#include <cstring>
#include <fstream>

namespace dfternet {

namespace {

constexpr char kPackedMagic[4] = {'D', 'F', 'T', 'N'};
constexpr char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};
constexpr uint16_t kPackedVersion = 1;
constexpr uint16_t kCheckpointVersion = 1;

enum LayerKind : uint8_t { kConv = 1, kDenseHidden = 2, kDenseOutput = 3 };

struct Writer {
  std::vector<uint8_t> out;

  void u8(uint8_t v) { out.push_back(v); }
  void u16(uint16_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    if (s.size() > 255) throw FormatError("serialize: name too long");
    u8(static_cast<uint8_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
};

struct Reader {
  const std::vector<uint8_t>& in;
  size_t pos = 0;

  explicit Reader(const std::vector<uint8_t>& bytes) : in(bytes) {}

  void need(size_t n) const {
    if (pos + n > in.size()) throw FormatError("deserialize: truncated input");
  }
  uint8_t u8() {
    need(1);
    return in[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(in[pos] | (in[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const uint8_t n = u8();
    need(n);
    std::string s(in.begin() + static_cast<long>(pos), in.begin() + static_cast<long>(pos) + n);
    pos += n;
    return s;
  }
};

void write_ternary(Writer& w, uint8_t kind, const TernaryTensor& t) {
  w.u8(kind);
  w.u8(static_cast<uint8_t>(t.k));
  w.u8(static_cast<uint8_t>(t.shape.size()));
  for (int d : t.shape) w.u32(static_cast<uint32_t>(d));
  w.f64(t.alpha);
  for (uint64_t word : t.sign_plane) w.u64(word);
  for (uint64_t word : t.value_plane) w.u64(word);
}

TernaryTensor read_ternary(Reader& r, uint8_t expected_kind) {
  const uint8_t kind = r.u8();
  if (kind != expected_kind) throw FormatError("deserialize: unexpected layer kind");
  TernaryTensor t;
  t.k = r.u8();
  if (t.k != 2) throw FormatError("deserialize: unsupported bit-width");
  const uint8_t rank = r.u8();
  for (int i = 0; i < rank; ++i) t.shape.push_back(static_cast<int>(r.u32()));
  t.alpha = r.f64();
  const int64_t words = (t.numel() + 63) / 64;
  t.sign_plane.resize(static_cast<size_t>(words));
  t.value_plane.resize(static_cast<size_t>(words));
  for (uint64_t& word : t.sign_plane) word = r.u64();
  for (uint64_t& word : t.value_plane) word = r.u64();
  return t;
}

void write_thresholds(Writer& w, const QuantBNThresholds& thr) {
  for (int c = 0; c < thr.channels(); ++c) {
    w.f64(thr.upper[static_cast<size_t>(c)]);
    w.f64(thr.lower[static_cast<size_t>(c)]);
  }
}

QuantBNThresholds read_thresholds(Reader& r, int channels) {
  QuantBNThresholds thr;
  thr.upper.resize(static_cast<size_t>(channels));
  thr.lower.resize(static_cast<size_t>(channels));
  thr.gamma_sign.resize(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    thr.upper[static_cast<size_t>(c)] = r.f64();
    thr.lower[static_cast<size_t>(c)] = r.f64();
    // Raw-space band width has the sign of gamma.
    thr.gamma_sign[static_cast<size_t>(c)] =
        thr.upper[static_cast<size_t>(c)] >= thr.lower[static_cast<size_t>(c)] ? 1 : -1;
  }
  return thr;
}

void write_branches(Writer& w, const FusionSpec& fusion) {
  w.u8(static_cast<uint8_t>(fusion.mode));
  w.u8(static_cast<uint8_t>(fusion.branches.size()));
  for (const BranchSpec& b : fusion.branches) {
    w.str(b.name);
    w.u16(static_cast<uint16_t>(b.chan_begin));
    w.u16(static_cast<uint16_t>(b.chan_end));
    w.u8(b.reduced ? 1 : 0);
  }
}

FusionSpec read_branches(Reader& r) {
  FusionSpec f;
  const uint8_t mode = r.u8();
  if (mode > 2) throw FormatError("deserialize: bad fusion mode");
  f.mode = static_cast<FusionMode>(mode);
  const uint8_t n = r.u8();
  for (int i = 0; i < n; ++i) {
    BranchSpec b;
    b.name = r.str();
    b.chan_begin = r.u16();
    b.chan_end = r.u16();
    b.reduced = r.u8() != 0;
    f.branches.push_back(std::move(b));
  }
  return f;
}

}  // namespace

std::vector<uint8_t> serialize_packed(const PackedModel& model) {
  Writer w;
  w.out.insert(w.out.end(), kPackedMagic, kPackedMagic + 4);
  w.u16(kPackedVersion);
  int layer_count = 2;
  for (const auto& branch : model.branch_convs) layer_count += static_cast<int>(branch.size());
  w.u16(static_cast<uint16_t>(layer_count));

  w.u16(static_cast<uint16_t>(model.window_t));
  w.u16(static_cast<uint16_t>(model.channels));
  w.u16(static_cast<uint16_t>(model.classes));
  write_branches(w, model.fusion);
  w.u8(static_cast<uint8_t>(model.pools.size()));
  for (size_t i = 0; i < model.pools.size(); ++i) {
    w.u8(static_cast<uint8_t>(model.pools[i]));
    w.u8(static_cast<uint8_t>(model.strides[i]));
  }

  for (const auto& branch : model.branch_convs) {
    for (const PackedConvLayer& layer : branch) {
      write_ternary(w, kConv, layer.kernel);
      write_thresholds(w, layer.thresholds);
    }
  }
  write_ternary(w, kDenseHidden, model.fc1.weights);
  for (double b : model.fc1.bias) w.f64(b);
  write_thresholds(w, model.fc1.thresholds);
  write_ternary(w, kDenseOutput, model.fcout.weights);
  for (double b : model.fcout.bias) w.f64(b);
  return std::move(w.out);
}

PackedModel deserialize_packed(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kPackedMagic, 4) != 0)
    throw FormatError("not a DFTN model file");
  r.pos = 4;
  const uint16_t version = r.u16();
  if (version != kPackedVersion)
    throw FormatError("DFTN format version " + std::to_string(version) + " not supported");
  const uint16_t layer_count = r.u16();

  PackedModel m;
  m.version = version;
  m.window_t = r.u16();
  m.channels = r.u16();
  m.classes = r.u16();
  m.fusion = read_branches(r);
  const uint8_t stages = r.u8();
  for (int i = 0; i < stages; ++i) {
    m.pools.push_back(r.u8());
    m.strides.push_back(r.u8());
  }
  if (m.fusion.branches.empty()) throw FormatError("DFTN: no branches");
  if (layer_count != static_cast<int>(m.fusion.branches.size()) * stages + 2)
    throw FormatError("DFTN: layer count disagrees with branch/stage structure");

  m.branch_convs.resize(m.fusion.branches.size());
  for (auto& branch : m.branch_convs) {
    for (int i = 0; i < stages; ++i) {
      PackedConvLayer layer;
      layer.kernel = read_ternary(r, kConv);
      if (layer.kernel.shape.size() != 3) throw FormatError("DFTN: conv kernel must be rank 3");
      layer.thresholds = read_thresholds(r, layer.kernel.dim(0));
      branch.push_back(std::move(layer));
    }
  }
  m.fc1.weights = read_ternary(r, kDenseHidden);
  if (m.fc1.weights.shape.size() != 2) throw FormatError("DFTN: dense weights must be rank 2");
  m.fc1.bias.resize(static_cast<size_t>(m.fc1.weights.dim(1)));
  for (double& b : m.fc1.bias) b = r.f64();
  m.fc1.has_bn = true;
  m.fc1.thresholds = read_thresholds(r, m.fc1.weights.dim(1));
  m.fcout.weights = read_ternary(r, kDenseOutput);
  if (m.fcout.weights.shape.size() != 2) throw FormatError("DFTN: dense weights must be rank 2");
  m.fcout.bias.resize(static_cast<size_t>(m.fcout.weights.dim(1)));
  for (double& b : m.fcout.bias) b = r.f64();
  m.fcout.has_bn = false;
  if (r.pos != bytes.size()) throw FormatError("DFTN: trailing bytes");
  return m;
}

void save_packed(const PackedModel& model, const std::string& path) {
  const std::vector<uint8_t> bytes = serialize_packed(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path);
}

PackedModel load_packed(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_packed(bytes);
}

namespace {

void write_bn(Writer& w, const BatchNormState& bn) {
  w.u16(static_cast<uint16_t>(bn.channels()));
  for (float v : bn.gamma) w.f32(v);
  for (float v : bn.beta) w.f32(v);
  for (float v : bn.running_mu) w.f32(v);
  for (float v : bn.running_sigma) w.f32(v);
}

BatchNormState read_bn(Reader& r) {
  const uint16_t c = r.u16();
  BatchNormState bn = BatchNormState::init(c);
  for (float& v : bn.gamma) v = r.f32();
  for (float& v : bn.beta) v = r.f32();
  for (float& v : bn.running_mu) v = r.f32();
  for (float& v : bn.running_sigma) v = r.f32();
  return bn;
}

void write_dense_tensor(Writer& w, const DenseTensor& t) {
  w.u8(static_cast<uint8_t>(t.shape.size()));
  for (int d : t.shape) w.u32(static_cast<uint32_t>(d));
  for (float v : t.data) w.f32(v);
}

DenseTensor read_dense_tensor(Reader& r) {
  const uint8_t rank = r.u8();
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(static_cast<int>(r.u32()));
  DenseTensor t(s);
  for (float& v : t.data) v = r.f32();
  return t;
}

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const TrainState& state) {
  Writer w;
  w.out.insert(w.out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  w.u16(kCheckpointVersion);
  w.u16(static_cast<uint16_t>(state.net.window_t));
  w.u16(static_cast<uint16_t>(state.net.classes));
  w.u16(static_cast<uint16_t>(state.net.dense_units));
  w.u8(static_cast<uint8_t>(state.net.stages()));
  for (int i = 0; i < state.net.stages(); ++i) {
    w.u16(static_cast<uint16_t>(state.net.conv_filters[static_cast<size_t>(i)]));
    w.u8(static_cast<uint8_t>(state.net.conv_kernels[static_cast<size_t>(i)]));
    w.u8(static_cast<uint8_t>(state.net.conv_strides[static_cast<size_t>(i)]));
    w.u8(static_cast<uint8_t>(state.net.pools[static_cast<size_t>(i)]));
  }
  write_branches(w, state.fusion);
  w.u8(static_cast<uint8_t>(state.qcfg.k_w));
  w.u8(static_cast<uint8_t>(state.qcfg.k_a));
  w.f64(state.qcfg.xi);
  for (const auto& branch : state.eps_a_conv)
    for (double e : branch) w.f64(e);
  w.f64(state.eps_a_fc1);
  for (const auto& branch : state.branch_convs) {
    for (const ConvLayerState& layer : branch) {
      write_dense_tensor(w, layer.kernel);
      write_bn(w, layer.bn);
    }
  }
  write_dense_tensor(w, state.fc1.weights);
  for (float v : state.fc1.bias) w.f32(v);
  write_bn(w, state.fc1.bn);
  write_dense_tensor(w, state.fcout.weights);
  for (float v : state.fcout.bias) w.f32(v);
  return std::move(w.out);
}

TrainState deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a DFCK checkpoint file");
  r.pos = 4;
  const uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("DFCK version " + std::to_string(version) + " not supported");

  NetworkConfig net;
  net.window_t = r.u16();
  net.classes = r.u16();
  net.dense_units = r.u16();
  const uint8_t stages = r.u8();
  net.conv_filters.clear();
  net.conv_kernels.clear();
  net.conv_strides.clear();
  net.pools.clear();
  for (int i = 0; i < stages; ++i) {
    net.conv_filters.push_back(r.u16());
    net.conv_kernels.push_back(r.u8());
    net.conv_strides.push_back(r.u8());
    net.pools.push_back(r.u8());
  }
  FusionSpec fusion = read_branches(r);
  QuantConfig qcfg;
  qcfg.k_w = r.u8();
  qcfg.k_a = r.u8();
  qcfg.xi = r.f64();

  TrainState st = init_train_state(net, fusion, qcfg, TrainHyper{});
  for (auto& branch : st.eps_a_conv)
    for (double& e : branch) e = r.f64();
  st.eps_a_fc1 = r.f64();
  for (auto& branch : st.branch_convs) {
    for (ConvLayerState& layer : branch) {
      layer.kernel = read_dense_tensor(r);
      layer.bn = read_bn(r);
    }
  }
  st.fc1.weights = read_dense_tensor(r);
  for (float& v : st.fc1.bias) v = r.f32();
  st.fc1.bn = read_bn(r);
  st.fcout.weights = read_dense_tensor(r);
  for (float& v : st.fcout.bias) v = r.f32();
  if (r.pos != bytes.size()) throw FormatError("DFCK: trailing bytes");
  return st;
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  const std::vector<uint8_t> bytes = serialize_checkpoint(state);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dfternet
