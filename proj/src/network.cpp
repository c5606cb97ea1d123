#include "maggen/network.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "maggen/error.hpp"
#include "maggen/rng.hpp"

namespace maggen {

void ModelConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (feature_dims.empty()) throw ConfigError("model: feature_dims must be non-empty");
  if (metric_dims.empty()) throw ConfigError("model: metric_dims must be non-empty");
  for (int64_t d : feature_dims)
    if (d < 1) throw ConfigError("model: feature widths must be >= 1");
  for (int64_t d : metric_dims)
    if (d < 1) throw ConfigError("model: metric widths must be >= 1");
}

int64_t ParamSet::scalar_count() const {
  int64_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

ParamSet ParamSet::detached() const {
  ParamSet out;
  out.tensors.reserve(tensors.size());
  for (const Tensor& t : tensors) out.tensors.push_back(t.detached());
  return out;
}

std::vector<Tensor> Model::all_params() const {
  std::vector<Tensor> out;
  out.reserve(psi.tensors.size() + theta.tensors.size() + phi.tensors.size());
  for (const Tensor& t : psi.tensors) out.push_back(t);
  for (const Tensor& t : theta.tensors) out.push_back(t);
  for (const Tensor& t : phi.tensors) out.push_back(t);
  return out;
}

namespace {

ParamSet init_stack(int64_t in_dim, const std::vector<int64_t>& widths, Rng& rng) {
  ParamSet params;
  int64_t fan_in = in_dim;
  for (int64_t out_dim : widths) {
    double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(static_cast<size_t>(fan_in * out_dim));
    for (auto& x : w) x = scale * rng.next_gaussian();
    params.tensors.push_back(Tensor::from({fan_in, out_dim}, std::move(w)));
    params.tensors.push_back(Tensor::zeros({out_dim}));
    fan_in = out_dim;
  }
  return params;
}

}  // namespace

Model init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  Model m;
  m.config = config;
  m.psi = init_stack(config.input_dim, config.feature_dims, rng);
  m.theta = init_stack(config.feature_width(), {config.num_classes}, rng);
  m.phi = init_stack(config.feature_width(), config.metric_dims, rng);
  return m;
}

Tensor mlp_forward(const ParamSet& params, const Tensor& inputs) {
  if (params.tensors.empty() || params.tensors.size() % 2 != 0) {
    throw UsageError("mlp_forward: parameter set must hold (weight, bias) pairs");
  }
  Tensor x = inputs;
  const size_t layers = params.tensors.size() / 2;
  for (size_t l = 0; l < layers; ++l) {
    const Tensor& w = params.tensors[2 * l];
    const Tensor& b = params.tensors[2 * l + 1];
    x = add(matmul(x, w), broadcast_axis(b, 0, x.rows()));
    if (l + 1 < layers) x = relu(x);
  }
  return x;
}

Tensor features(const ParamSet& psi, const Tensor& batch_inputs) {
  return mlp_forward(psi, batch_inputs);
}

Tensor logits(const ParamSet& theta, const Tensor& feats) {
  return mlp_forward(theta, feats);
}

Tensor metric_embed(const ParamSet& phi, const Tensor& feats) {
  return l2_normalize_rows(mlp_forward(phi, feats));
}

ParamSet apply_update(const ParamSet& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.tensors.size()) {
    throw UsageError("apply_update: gradient count " + std::to_string(grads.size()) +
                     " does not match parameter count " + std::to_string(params.tensors.size()));
  }
  ParamSet out;
  out.tensors.reserve(params.tensors.size());
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    if (grads[i].shape() != params.tensors[i].shape()) {
      throw ShapeError("apply_update: gradient shape " + shape_str(grads[i].shape()) +
                       " does not match parameter shape " + shape_str(params.tensors[i].shape()));
    }
    out.tensors.push_back(sub(params.tensors[i], scalar_mul(grads[i], lr)));
  }
  return out;
}

ParamSet watch_params(Tape& tape, const ParamSet& params) {
  ParamSet out;
  out.tensors.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) out.tensors.push_back(tape.watch(t.detached()));
  return out;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t& pos) {
  if (pos + 4 > buf.size()) throw TruncatedError("checkpoint: truncated while reading u32");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]))
         << (8 * i);
  pos += 4;
  return v;
}

void put_f64(std::string& buf, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const std::string& buf, size_t& pos) {
  if (pos + 8 > buf.size()) throw TruncatedError("checkpoint: truncated while reading f64");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]))
            << (8 * i);
  pos += 8;
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

std::string join_dims(const std::vector<int64_t>& dims) {
  std::ostringstream os;
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  return os.str();
}

std::vector<int64_t> parse_dims(const std::string& s) {
  std::vector<int64_t> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoll(tok));
  return out;
}

void put_line(std::string& buf, const std::string& line) {
  put_u32(buf, static_cast<uint32_t>(line.size()));
  buf.append(line);
}

constexpr char kMagic[4] = {'M', 'G', 'M', '1'};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::string body;
  std::vector<std::string> lines = {
      "input_dim=" + std::to_string(model.config.input_dim),
      "feature_dims=" + join_dims(model.config.feature_dims),
      "num_classes=" + std::to_string(model.config.num_classes),
      "metric_dims=" + join_dims(model.config.metric_dims),
      "seed=" + std::to_string(model.config.seed),
  };
  put_u32(body, static_cast<uint32_t>(lines.size()));
  for (const auto& line : lines) put_line(body, line);
  for (const Tensor& t : model.all_params())
    for (double x : t.data()) put_f64(body, x);

  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  std::string tail;
  put_u32(tail, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 4);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  out.write(tail.data(), static_cast<std::streamsize>(tail.size()));
  if (!out) throw IoError("checkpoint: write to " + path + " failed");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (raw.size() < 4 || std::memcmp(raw.data(), kMagic, 4) != 0) {
    throw BadMagicError("checkpoint: bad magic, expected MGM1");
  }
  if (raw.size() < 8) throw TruncatedError("checkpoint: missing checksum");
  std::string body = raw.substr(4, raw.size() - 8);
  size_t tail_pos = raw.size() - 4;
  uint32_t stored = get_u32(raw, tail_pos);
  uint32_t actual = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  if (stored != actual) {
    throw ChecksumError("checkpoint: CRC-32 mismatch over bytes [4," +
                        std::to_string(raw.size() - 4) + ") of " + path);
  }

  size_t pos = 0;
  uint32_t line_count = get_u32(body, pos);
  ModelConfig config;
  for (uint32_t i = 0; i < line_count; ++i) {
    uint32_t len = get_u32(body, pos);
    if (pos + len > body.size()) throw TruncatedError("checkpoint: truncated config line");
    std::string line = body.substr(pos, len);
    pos += len;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed config line " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    if (key == "input_dim") config.input_dim = std::stoll(val);
    else if (key == "feature_dims") config.feature_dims = parse_dims(val);
    else if (key == "num_classes") config.num_classes = std::stoll(val);
    else if (key == "metric_dims") config.metric_dims = parse_dims(val);
    else if (key == "seed") config.seed = std::stoull(val);
    else throw FormatError("checkpoint: unknown config key " + key);
  }
  config.validate();

  // Rebuild tensors with the config's layer shapes, consuming the buffer in
  // declaration order.
  Model m;
  m.config = config;
  auto read_stack = [&](int64_t in_dim, const std::vector<int64_t>& widths) {
    ParamSet params;
    int64_t fan_in = in_dim;
    for (int64_t out_dim : widths) {
      std::vector<double> w(static_cast<size_t>(fan_in * out_dim));
      for (auto& x : w) x = get_f64(body, pos);
      params.tensors.push_back(Tensor::from({fan_in, out_dim}, std::move(w)));
      std::vector<double> b(static_cast<size_t>(out_dim));
      for (auto& x : b) x = get_f64(body, pos);
      params.tensors.push_back(Tensor::from({out_dim}, std::move(b)));
      fan_in = out_dim;
    }
    return params;
  };
  m.psi = read_stack(config.input_dim, config.feature_dims);
  m.theta = read_stack(config.feature_width(), {config.num_classes});
  m.phi = read_stack(config.feature_width(), config.metric_dims);
  if (pos != body.size()) {
    throw FormatError("checkpoint: " + std::to_string(body.size() - pos) +
                      " unexpected trailing bytes");
  }
  return m;
}

bool models_bitwise_equal(const Model& a, const Model& b) {
  auto pa = a.all_params();
  auto pb = b.all_params();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(pa[i], pb[i])) return false;
  return true;
}

}  // namespace maggen
