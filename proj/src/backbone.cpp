#include "mame/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mame/error.hpp"
#include "mame/rng.hpp"

namespace mame {

namespace {

constexpr char kWeightsMagic[6] = {'M', 'A', 'M', 'E', 'W', '1'};

std::string stage_label(const StageSpec& stage, std::size_t index) {
  std::string label = "stage " + std::to_string(index);
  if (!stage.name.empty()) label += " (" + stage.name + ")";
  return label;
}

std::string_view to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "none"; }

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::none:
      return "none";
    case Pooling::max2x2:
      return "max2x2";
    case Pooling::global_average:
      return "global_average";
  }
  return "none";
}

Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "none") return Nonlinearity::none;
  throw ConfigError("unknown nonlinearity '" + s + "'");
}

Pooling parse_pooling(const std::string& s) {
  if (s == "none") return Pooling::none;
  if (s == "max2x2") return Pooling::max2x2;
  if (s == "global_average") return Pooling::global_average;
  throw ConfigError("unknown pooling '" + s + "'");
}

/// Activation with positions as rows (row-major y, x) and channels as columns.
struct Activation {
  int height = 0;
  int width = 0;
  Eigen::MatrixXd values;
};

Eigen::MatrixXd im2col(const Activation& in, int kernel, int stride, int outH, int outW) {
  const int channels = static_cast<int>(in.values.cols());
  Eigen::MatrixXd col(static_cast<Eigen::Index>(outH) * outW, static_cast<Eigen::Index>(channels) * kernel * kernel);
  for (int c = 0; c < channels; ++c) {
    const double* src = in.values.col(c).data();
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        double* dst = col.col((c * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < outH; ++oy) {
          const double* row = src + static_cast<std::ptrdiff_t>(oy * stride + ky) * in.width + kx;
          for (int ox = 0; ox < outW; ++ox) *dst++ = row[ox * stride];
        }
      }
    }
  }
  return col;
}

void col2im_add(const Eigen::MatrixXd& col, int kernel, int stride, int outH, int outW, Activation& din) {
  const int channels = static_cast<int>(din.values.cols());
  for (int c = 0; c < channels; ++c) {
    double* dst = din.values.col(c).data();
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const double* src = col.col((c * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < outH; ++oy) {
          double* row = dst + static_cast<std::ptrdiff_t>(oy * stride + ky) * din.width + kx;
          for (int ox = 0; ox < outW; ++ox) row[ox * stride] += *src++;
        }
      }
    }
  }
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& out, float f) { write_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(bytes_[pos_]) | (static_cast<std::uint32_t>(bytes_[pos_ + 1]) << 8) |
                      (static_cast<std::uint32_t>(bytes_[pos_ + 2]) << 16) |
                      (static_cast<std::uint32_t>(bytes_[pos_ + 3]) << 24);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void expect_magic(const char* magic, std::size_t n) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, magic, n) != 0) {
      throw LoadError(source_ + ": bad magic, expected \"" + std::string(magic, n) + "\"");
    }
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError(source_ + ": truncated weights file");
  }
  std::vector<std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

BackboneConfig BackboneConfig::desk_default() {
  BackboneConfig config;
  config.input = {64, 64, 3};
  config.stages = {
      StageSpec{"stage1", {ConvSpec{7, 2, 16}}, Nonlinearity::relu, Pooling::none},
      StageSpec{"stage2", {ConvSpec{3, 1, 32}, ConvSpec{3, 1, 32}}, Nonlinearity::relu, Pooling::max2x2},
      StageSpec{"stage3", {ConvSpec{3, 1, 64}}, Nonlinearity::relu, Pooling::global_average},
  };
  config.tapStage = {0, 1, 2};
  return config;
}

void BackboneConfig::validate() const {
  if (input.height <= 0 || input.width <= 0 || (input.channels != 1 && input.channels != 3)) {
    throw ConfigError("invalid input shape " + to_string(input));
  }
  if (stages.empty()) throw ConfigError("backbone has no stages");
  int h = input.height;
  int w = input.width;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& stage = stages[s];
    if (stage.convs.empty()) throw ConfigError(stage_label(stage, s) + ": no convolutions");
    for (const auto& conv : stage.convs) {
      if (conv.kernel <= 0 || conv.stride <= 0 || conv.filters <= 0) {
        throw ConfigError(stage_label(stage, s) + ": kernel, stride and filters must be positive");
      }
      if (conv.stride > h || conv.stride > w) {
        throw ConfigError(stage_label(stage, s) + ": stride " + std::to_string(conv.stride) +
                          " exceeds input size " + std::to_string(h) + "x" + std::to_string(w));
      }
      if (conv.kernel > h || conv.kernel > w) {
        throw ConfigError(stage_label(stage, s) + ": non-positive output size (kernel " +
                          std::to_string(conv.kernel) + " on " + std::to_string(h) + "x" + std::to_string(w) + ")");
      }
      h = (h - conv.kernel) / conv.stride + 1;
      w = (w - conv.kernel) / conv.stride + 1;
    }
    if (stage.pooling == Pooling::max2x2) {
      if (h < 2 || w < 2) {
        throw ConfigError(stage_label(stage, s) + ": non-positive output size after 2x2 max pooling");
      }
      h /= 2;
      w /= 2;
    } else if (stage.pooling == Pooling::global_average) {
      if (s + 1 != stages.size()) {
        throw ConfigError(stage_label(stage, s) + ": global average pooling must be the last stage");
      }
      h = 1;
      w = 1;
    }
  }
  const int n = static_cast<int>(stages.size());
  for (Tap tap : kAllTaps) {
    const int stage = tapStage[static_cast<std::size_t>(tap_index(tap))];
    if (stage < 0 || stage >= n) {
      throw ConfigError("tap '" + std::string(to_string(tap)) + "' maps to undeclared stage " + std::to_string(stage));
    }
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& config) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& stage : config.stages) {
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& conv : stage.convs) {
      convs.push_back({{"kernel", conv.kernel}, {"stride", conv.stride}, {"filters", conv.filters}});
    }
    stages.push_back({{"name", stage.name},
                      {"convs", convs},
                      {"nonlinearity", to_string(stage.nonlinearity)},
                      {"pooling", to_string(stage.pooling)}});
  }
  j = {{"input", {config.input.height, config.input.width, config.input.channels}},
       {"stages", stages},
       {"taps", {{"early", config.tapStage[0]}, {"mid", config.tapStage[1]}, {"late", config.tapStage[2]}}},
       {"seed", config.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& config) {
  try {
    config = BackboneConfig::desk_default();
    if (j.contains("input")) {
      const auto& in = j.at("input");
      config.input = {in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
    }
    if (j.contains("stages")) {
      config.stages.clear();
      for (const auto& s : j.at("stages")) {
        StageSpec stage;
        stage.name = s.value("name", "");
        for (const auto& c : s.at("convs")) {
          stage.convs.push_back({c.at("kernel").get<int>(), c.value("stride", 1), c.at("filters").get<int>()});
        }
        stage.nonlinearity = parse_nonlinearity(s.value("nonlinearity", "relu"));
        stage.pooling = parse_pooling(s.value("pooling", "none"));
        config.stages.push_back(std::move(stage));
      }
    }
    if (j.contains("taps")) {
      for (auto& [name, stage] : j.at("taps").items()) {
        config.tapStage[static_cast<std::size_t>(tap_index(parse_tap(name)))] = stage.get<int>();
      }
    }
    config.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed backbone config: ") + e.what());
  }
}

Backbone::Backbone(BackboneConfig config) : config_(std::move(config)) {
  config_.validate();
  int h = config_.input.height;
  int w = config_.input.width;
  int channels = config_.input.channels;
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const auto& stage = config_.stages[s];
    for (const auto& conv : stage.convs) {
      ConvLayer layer;
      layer.stage = static_cast<int>(s);
      layer.inChannels = channels;
      layer.outChannels = conv.filters;
      layer.kernel = conv.kernel;
      layer.stride = conv.stride;
      const int fanIn = channels * conv.kernel * conv.kernel;
      const double bound = std::sqrt(6.0 / fanIn);
      Rng rng(mix_seed(config_.seed, layers_.size()));
      layer.weights.resize(fanIn, conv.filters);
      // Filled in (out, in, ky, kx) order to match the weights file layout.
      for (int o = 0; o < conv.filters; ++o) {
        for (int r = 0; r < fanIn; ++r) {
          layer.weights(r, o) = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
        }
      }
      layer.bias = Eigen::VectorXd::Zero(conv.filters);
      layers_.push_back(std::move(layer));
      h = (h - conv.kernel) / conv.stride + 1;
      w = (w - conv.kernel) / conv.stride + 1;
      channels = conv.filters;
    }
    if (stage.pooling == Pooling::max2x2) {
      h /= 2;
      w /= 2;
    } else if (stage.pooling == Pooling::global_average) {
      h = 1;
      w = 1;
    }
    stageShapes_.push_back({h, w, channels});
  }
}

TapShape Backbone::tap_shape(Tap tap) const {
  return stageShapes_[static_cast<std::size_t>(config_.tapStage[static_cast<std::size_t>(tap_index(tap))])];
}

struct Backbone::Trace {
  struct Op {
    enum class Kind { conv, relu, maxpool, gap };
    Kind kind = Kind::conv;
    int layer = -1;
    int inH = 0, inW = 0;
    int outH = 0, outW = 0;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
    std::vector<Eigen::Index> argmax;
  };
  std::vector<Op> ops;
  std::vector<std::size_t> stageEnd;  // one past the last op of each stage
  std::vector<Activation> stageOutput;
};

Backbone::Trace Backbone::run_forward(const ImageTensor& image, int lastStage) const {
  if (image.shape() != config_.input) {
    throw DimensionError("image shape " + to_string(image.shape()) + " does not match backbone input " +
                         to_string(config_.input));
  }
  Trace trace;
  Activation act;
  act.height = image.height();
  act.width = image.width();
  const int channels = image.channels();
  act.values.resize(static_cast<Eigen::Index>(act.height) * act.width, channels);
  auto data = image.data();
  for (Eigen::Index p = 0; p < act.values.rows(); ++p) {
    for (int c = 0; c < channels; ++c) act.values(p, c) = data[static_cast<std::size_t>(p) * channels + c];
  }

  std::size_t layerIndex = 0;
  for (int s = 0; s <= lastStage; ++s) {
    const auto& stage = config_.stages[static_cast<std::size_t>(s)];
    for (std::size_t ci = 0; ci < stage.convs.size(); ++ci, ++layerIndex) {
      const auto& layer = layers_[layerIndex];
      Trace::Op op;
      op.kind = Trace::Op::Kind::conv;
      op.layer = static_cast<int>(layerIndex);
      op.inH = act.height;
      op.inW = act.width;
      op.outH = (act.height - layer.kernel) / layer.stride + 1;
      op.outW = (act.width - layer.kernel) / layer.stride + 1;
      Activation out;
      out.height = op.outH;
      out.width = op.outW;
      out.values.noalias() = im2col(act, layer.kernel, layer.stride, op.outH, op.outW) * layer.weights;
      out.values.rowwise() += layer.bias.transpose();
      trace.ops.push_back(std::move(op));
      act = std::move(out);
      if (stage.nonlinearity == Nonlinearity::relu) {
        Trace::Op relu;
      relu.kind = Trace::Op::Kind::relu;
        relu.mask = act.values.array() > 0.0;
        act.values = act.values.cwiseMax(0.0);
        trace.ops.push_back(std::move(relu));
      }
    }
    if (stage.pooling == Pooling::max2x2) {
      Trace::Op pool;
      pool.kind = Trace::Op::Kind::maxpool;
      pool.inH = act.height;
      pool.inW = act.width;
      pool.outH = act.height / 2;
      pool.outW = act.width / 2;
      const Eigen::Index ch = act.values.cols();
      Activation out;
      out.height = pool.outH;
      out.width = pool.outW;
      out.values.resize(static_cast<Eigen::Index>(pool.outH) * pool.outW, ch);
      pool.argmax.resize(static_cast<std::size_t>(out.values.size()));
      for (Eigen::Index c = 0; c < ch; ++c) {
        for (int oy = 0; oy < pool.outH; ++oy) {
          for (int ox = 0; ox < pool.outW; ++ox) {
            Eigen::Index best = (2 * oy) * act.width + 2 * ox;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const Eigen::Index p = (2 * oy + dy) * act.width + 2 * ox + dx;
                if (act.values(p, c) > act.values(best, c)) best = p;
              }
            }
            const Eigen::Index o = oy * pool.outW + ox;
            out.values(o, c) = act.values(best, c);
            pool.argmax[static_cast<std::size_t>(c * out.values.rows() + o)] = best;
          }
        }
      }
      trace.ops.push_back(std::move(pool));
      act = std::move(out);
    } else if (stage.pooling == Pooling::global_average) {
      Trace::Op gap;
      gap.kind = Trace::Op::Kind::gap;
      gap.inH = act.height;
      gap.inW = act.width;
      Activation out;
      out.height = 1;
      out.width = 1;
      out.values = act.values.colwise().mean();
      trace.ops.push_back(std::move(gap));
      act = std::move(out);
    }
    trace.stageEnd.push_back(trace.ops.size());
    trace.stageOutput.push_back(act);
  }
  return trace;
}

FeatureMap Backbone::tap_map(const Trace& trace, Tap tap) const {
  const auto& out = trace.stageOutput[static_cast<std::size_t>(config_.tapStage[static_cast<std::size_t>(tap_index(tap))])];
  FeatureMap fm;
  fm.tap = tap;
  fm.height = out.height;
  fm.width = out.width;
  fm.values = out.values.transpose();
  return fm;
}

FeatureMaps Backbone::forward(const ImageTensor& image, const TapSet& taps) const {
  int last = -1;
  for (Tap tap : taps) last = std::max(last, config_.tapStage[static_cast<std::size_t>(tap_index(tap))]);
  FeatureMaps maps;
  if (last < 0) return maps;
  const Trace trace = run_forward(image, last);
  for (Tap tap : taps) maps.emplace(tap, tap_map(trace, tap));
  return maps;
}

InputGradient Backbone::grad_wrt_input(const ImageTensor& image, const TapSet& taps, const TapLoss& loss) const {
  int last = -1;
  for (Tap tap : taps) last = std::max(last, config_.tapStage[static_cast<std::size_t>(tap_index(tap))]);
  InputGradient result;
  result.gradient.shape = image.shape();
  result.gradient.data.assign(image.shape().size(), 0.0);
  if (last < 0) {
    result.loss = loss(FeatureMaps{}).value;
    return result;
  }

  const Trace trace = run_forward(image, last);
  FeatureMaps maps;
  for (Tap tap : taps) maps.emplace(tap, tap_map(trace, tap));
  LossEvaluation eval = loss(maps);

  auto tap_list = [&] {
    std::string names;
    for (Tap tap : taps) names += (names.empty() ? "" : ",") + std::string(to_string(tap));
    return names;
  };
  for (auto& [tap, grad] : eval.gradients) {
    if (!maps.contains(tap)) {
      throw ConfigError("loss returned a gradient for unrequested tap '" + std::string(to_string(tap)) + "'");
    }
    const auto& fm = maps.at(tap);
    if (grad.rows() != fm.values.rows() || grad.cols() != fm.values.cols()) {
      throw DimensionError("loss gradient for tap '" + std::string(to_string(tap)) + "' has wrong shape");
    }
    if (!grad.allFinite()) {
      throw NumericError("non-finite loss gradient at tap '" + std::string(to_string(tap)) + "'");
    }
  }
  if (!std::isfinite(eval.value)) {
    std::string offender;
    for (const auto& [tap, fm] : maps) {
      if (!fm.values.allFinite()) offender = std::string(to_string(tap));
    }
    throw NumericError("non-finite loss at tap '" + (offender.empty() ? tap_list() : offender) + "'");
  }
  result.loss = eval.value;

  // Gradient flowing out of the current stage boundary, positions x channels.
  Activation grad;
  bool have_grad = false;
  for (int s = last; s >= 0; --s) {
    const auto& stageOut = trace.stageOutput[static_cast<std::size_t>(s)];
    for (Tap tap : kAllTaps) {
      if (config_.tapStage[static_cast<std::size_t>(tap_index(tap))] != s) continue;
      auto it = eval.gradients.find(tap);
      if (it == eval.gradients.end()) continue;
      if (!have_grad) {
        grad.height = stageOut.height;
        grad.width = stageOut.width;
        grad.values = Eigen::MatrixXd::Zero(stageOut.values.rows(), stageOut.values.cols());
        have_grad = true;
      }
      grad.values += it->second.transpose();
    }
    if (!have_grad) continue;
    const std::size_t begin = s == 0 ? 0 : trace.stageEnd[static_cast<std::size_t>(s - 1)];
    for (std::size_t i = trace.stageEnd[static_cast<std::size_t>(s)]; i-- > begin;) {
      const auto& op = trace.ops[i];
      switch (op.kind) {
        case Trace::Op::Kind::relu:
          grad.values = grad.values.cwiseProduct(op.mask.cast<double>().matrix());
          break;
        case Trace::Op::Kind::gap: {
          Activation din;
          din.height = op.inH;
          din.width = op.inW;
          const Eigen::Index positions = static_cast<Eigen::Index>(op.inH) * op.inW;
          din.values = grad.values.replicate(positions, 1) / static_cast<double>(positions);
          grad = std::move(din);
          break;
        }
        case Trace::Op::Kind::maxpool: {
          Activation din;
          din.height = op.inH;
          din.width = op.inW;
          din.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(op.inH) * op.inW, grad.values.cols());
          const Eigen::Index outRows = grad.values.rows();
          for (Eigen::Index c = 0; c < grad.values.cols(); ++c) {
            for (Eigen::Index o = 0; o < outRows; ++o) {
              din.values(op.argmax[static_cast<std::size_t>(c * outRows + o)], c) += grad.values(o, c);
            }
          }
          grad = std::move(din);
          break;
        }
        case Trace::Op::Kind::conv: {
          const auto& layer = layers_[static_cast<std::size_t>(op.layer)];
          const Eigen::MatrixXd dcol = grad.values * layer.weights.transpose();
          Activation din;
          din.height = op.inH;
          din.width = op.inW;
          din.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(op.inH) * op.inW, layer.inChannels);
          col2im_add(dcol, layer.kernel, layer.stride, op.outH, op.outW, din);
          grad = std::move(din);
          break;
        }
      }
    }
  }
  if (have_grad) {
    const int channels = image.channels();
    for (Eigen::Index p = 0; p < grad.values.rows(); ++p) {
      for (int c = 0; c < channels; ++c) {
        result.gradient.data[static_cast<std::size_t>(p) * channels + c] = grad.values(p, c);
      }
    }
  }
  return result;
}

void Backbone::export_weights(const std::filesystem::path& path) const {
  std::ostringstream out(std::ios::binary);
  out.write(kWeightsMagic, sizeof kWeightsMagic);
  write_u32(out, static_cast<std::uint32_t>(config_.stages.size()));
  for (const auto& stage : config_.stages) {
    write_u32(out, static_cast<std::uint32_t>(stage.convs.size()));
  }
  for (const auto& layer : layers_) {
    write_u32(out, static_cast<std::uint32_t>(layer.outChannels));
    write_u32(out, static_cast<std::uint32_t>(layer.inChannels));
    write_u32(out, static_cast<std::uint32_t>(layer.kernel));
    write_u32(out, static_cast<std::uint32_t>(layer.stride));
  }
  for (const auto& layer : layers_) {
    for (int o = 0; o < layer.outChannels; ++o) {
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) write_f32(out, static_cast<float>(layer.weights(r, o)));
    }
    for (int o = 0; o < layer.outChannels; ++o) write_f32(out, static_cast<float>(layer.bias(o)));
  }
  const std::string bytes = out.str();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

Backbone Backbone::load_weights(const std::filesystem::path& path) const {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const IoError& e) {
    throw LoadError(e.what());
  }
  ByteReader in(std::move(bytes), path.string());
  in.expect_magic(kWeightsMagic, sizeof kWeightsMagic);
  const std::uint32_t stageCount = in.u32();
  if (stageCount != config_.stages.size()) {
    throw LoadError(path.string() + ": shape mismatch: expected " + std::to_string(config_.stages.size()) +
                    " stages, found " + std::to_string(stageCount));
  }
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const std::uint32_t convs = in.u32();
    if (convs != config_.stages[s].convs.size()) {
      throw LoadError(path.string() + ": shape mismatch in " + stage_label(config_.stages[s], s) + ": expected " +
                      std::to_string(config_.stages[s].convs.size()) + " convolutions, found " + std::to_string(convs));
    }
  }
  for (const auto& layer : layers_) {
    const std::uint32_t out = in.u32(), inc = in.u32(), k = in.u32(), stride = in.u32();
    if (out != static_cast<std::uint32_t>(layer.outChannels) || inc != static_cast<std::uint32_t>(layer.inChannels) ||
        k != static_cast<std::uint32_t>(layer.kernel) || stride != static_cast<std::uint32_t>(layer.stride)) {
      const auto& stage = config_.stages[static_cast<std::size_t>(layer.stage)];
      std::ostringstream msg;
      msg << path.string() << ": shape mismatch in " << stage_label(stage, static_cast<std::size_t>(layer.stage))
          << ": expected (filters " << layer.outChannels << ", in " << layer.inChannels << ", kernel " << layer.kernel
          << ", stride " << layer.stride << "), found (filters " << out << ", in " << inc << ", kernel " << k
          << ", stride " << stride << ")";
      throw LoadError(msg.str());
    }
  }
  Backbone loaded = *this;
  for (auto& layer : loaded.layers_) {
    for (int o = 0; o < layer.outChannels; ++o) {
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) layer.weights(r, o) = in.f32();
    }
    for (int o = 0; o < layer.outChannels; ++o) layer.bias(o) = in.f32();
  }
  if (!in.done()) throw LoadError(path.string() + ": trailing bytes after weights");
  return loaded;
}

bool Backbone::same_weights(const Backbone& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].weights.rows() != other.layers_[i].weights.rows() ||
        layers_[i].weights.cols() != other.layers_[i].weights.cols()) {
      return false;
    }
    if (layers_[i].weights != other.layers_[i].weights || layers_[i].bias != other.layers_[i].bias) return false;
  }
  return true;
}

}  // namespace mame
