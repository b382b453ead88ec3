#include "tempal/alignment/encoder.hpp"

#include <cmath>
#include <numbers>

#include "tempal/numcore/init.hpp"

namespace tempal {

void ConvStackShape::validate() const {
  if (in_channels < 1 || conv1_filters < 1 || conv2_filters < 1) {
    throw DimensionError("conv stack: channel counts must be >= 1");
  }
  if (height < kConv1Kernel || width < kConv1Kernel || conv1_height() < kConv2Kernel ||
      conv1_width() < kConv2Kernel) {
    throw DimensionError("conv stack: frame " + std::to_string(height) + "x" + std::to_string(width) +
                         " too small for the two conv layers");
  }
}

template <typename S>
ConvStack<S> ConvStack<S>::init(const ConvStackShape& shape, Rng rng) {
  shape.validate();
  const S gain = S(std::numbers::sqrt2);
  ConvStack<S> s;
  s.shape = shape;
  s.conv1_w = orthogonal_init<S>(
      Shape{shape.conv1_filters, shape.in_channels, ConvStackShape::kConv1Kernel, ConvStackShape::kConv1Kernel},
      gain, rng.split("conv1").key());
  s.conv1_b = Tensor<S>({shape.conv1_filters});
  s.conv2_w = orthogonal_init<S>(
      Shape{shape.conv2_filters, shape.conv1_filters, ConvStackShape::kConv2Kernel, ConvStackShape::kConv2Kernel},
      gain, rng.split("conv2").key());
  s.conv2_b = Tensor<S>({shape.conv2_filters});
  for (auto& p : s.parameters()) p.set_requires_grad(true);
  return s;
}

template <typename S>
Tensor<S> ConvStack<S>::forward(GradTape<S>& tape, const Tensor<S>& input) const {
  if (input.rank() != 4 || input.dim(1) != shape.in_channels || input.dim(2) != shape.height ||
      input.dim(3) != shape.width) {
    throw DimensionError("conv stack expects [n x " + std::to_string(shape.in_channels) + " x " +
                         std::to_string(shape.height) + " x " + std::to_string(shape.width) + "], got " +
                         shape_str(input.shape()));
  }
  auto h = relu(tape, conv2d(tape, input, conv1_w, conv1_b, ConvStackShape::kConv1Stride));
  h = relu(tape, conv2d(tape, h, conv2_w, conv2_b, ConvStackShape::kConv2Stride));
  return reshape(tape, h, Shape{input.dim(0), shape.flat_size()});
}

template <typename S>
EncoderParams<S> EncoderParams<S>::init(int height, int width, int embedding_dim, Rng rng) {
  if (embedding_dim < 1) throw DimensionError("embedding_dim must be >= 1");
  EncoderParams<S> p;
  ConvStackShape shape;
  shape.height = height;
  shape.width = width;
  p.convs = ConvStack<S>::init(shape, rng.split("convs"));
  p.fc_w = orthogonal_init<S>(embedding_dim, shape.flat_size(), S(1), rng.split("fc").key());
  p.fc_b = Tensor<S>({embedding_dim});
  p.fc_w.set_requires_grad(true);
  p.fc_b.set_requires_grad(true);
  return p;
}

template <typename S>
std::vector<Tensor<S>> EncoderParams<S>::parameters() const {
  auto out = convs.parameters();
  out.push_back(fc_w);
  out.push_back(fc_b);
  return out;
}

template <typename S>
std::vector<std::string> EncoderParams<S>::parameter_names() {
  return {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b"};
}

template <typename S>
Index EncoderParams<S>::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

template <typename S>
Tensor<S> encode_batch(GradTape<S>& tape, const EncoderParams<S>& params, const Tensor<S>& frames) {
  if (frames.rank() != 3 || frames.dim(1) != params.height() || frames.dim(2) != params.width()) {
    throw DimensionError("encoder expects frames [n x " + std::to_string(params.height()) + " x " +
                         std::to_string(params.width()) + "], got " + shape_str(frames.shape()));
  }
  auto x = reshape(tape, frames, Shape{frames.dim(0), 1, frames.dim(1), frames.dim(2)});
  auto h = params.convs.forward(tape, x);
  return l2_normalize(tape, linear(tape, h, params.fc_w, params.fc_b));
}

Eigen::MatrixXf encode_rows(const EncoderParams<float>& params,
                            const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& rows) {
  const Index hw = Index(params.height()) * params.width();
  if (rows.cols() != hw) {
    throw DimensionError("encoder expects " + std::to_string(hw) + " pixels per frame, got " +
                         std::to_string(rows.cols()));
  }
  constexpr Index kChunk = 1024;
  Eigen::MatrixXf out(rows.rows(), params.embedding_dim());
  GradTape<float> tape(false);
  for (Index start = 0; start < rows.rows(); start += kChunk) {
    const Index n = std::min(kChunk, rows.rows() - start);
    Tensorf batch({n, params.height(), params.width()});
    batch.data() = Eigen::Map<const Eigen::VectorXf>(rows.data() + start * hw, n * hw);
    out.middleRows(start, n) = encode_batch(tape, params, batch).matrix();
  }
  return out;
}

Eigen::MatrixXf encode_frames(const EncoderParams<float>& params, std::span<const Observation> frames) {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(
      Index(frames.size()), Index(params.height()) * params.width());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (f.rows() != params.height() || f.cols() != params.width()) {
      throw DimensionError("encoder expects " + std::to_string(params.height()) + "x" +
                           std::to_string(params.width()) + " frames, got " + std::to_string(f.rows()) + "x" +
                           std::to_string(f.cols()));
    }
    rows.row(Index(i)) = Eigen::Map<const Eigen::RowVectorXf>(f.data(), f.size());
  }
  return encode_rows(params, rows);
}

Eigen::VectorXf encode(const EncoderParams<float>& params, const Observation& obs) {
  return encode_frames(params, std::span<const Observation>(&obs, 1)).row(0).transpose();
}

template struct ConvStack<float>;
template struct ConvStack<double>;
template struct EncoderParams<float>;
template struct EncoderParams<double>;
template Tensor<float> encode_batch(GradTape<float>&, const EncoderParams<float>&, const Tensor<float>&);
template Tensor<double> encode_batch(GradTape<double>&, const EncoderParams<double>&, const Tensor<double>&);

}  // namespace tempal
