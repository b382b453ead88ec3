#pragma once

#include <span>
#include <string>
#include <vector>

#include "tempal/envworld/env.hpp"
#include "tempal/numcore/ops.hpp"

namespace tempal {

/// Layer geometry shared by the encoder and the instantaneous agent branch:
/// conv 4x4 stride 2, conv 3x3 stride 2, both valid and ReLU-activated.
struct ConvStackShape {
  int in_channels = 1;
  int height = 16, width = 16;
  int conv1_filters = 8, conv2_filters = 16;

  static constexpr int kConv1Kernel = 4, kConv1Stride = 2;
  static constexpr int kConv2Kernel = 3, kConv2Stride = 2;

  int conv1_height() const { return (height - kConv1Kernel) / kConv1Stride + 1; }
  int conv1_width() const { return (width - kConv1Kernel) / kConv1Stride + 1; }
  int conv2_height() const { return (conv1_height() - kConv2Kernel) / kConv2Stride + 1; }
  int conv2_width() const { return (conv1_width() - kConv2Kernel) / kConv2Stride + 1; }
  int flat_size() const { return conv2_filters * conv2_height() * conv2_width(); }

  /// Throws DimensionError when the frame is too small for both layers.
  void validate() const;
};

template <typename S>
struct ConvStack {
  ConvStackShape shape;
  Tensor<S> conv1_w, conv1_b, conv2_w, conv2_b;

  /// Orthogonal weights (gain sqrt 2), zero biases.
  static ConvStack init(const ConvStackShape& shape, Rng rng);
  /// [n×c×h×w] -> [n×flat_size] after both ReLU layers.
  Tensor<S> forward(GradTape<S>& tape, const Tensor<S>& input) const;
  std::vector<Tensor<S>> parameters() const { return {conv1_w, conv1_b, conv2_w, conv2_b}; }
};

/// Self-supervised encoder: conv stack on one grayscale frame, FC to
/// embedding_dim, L2 normalization.
template <typename S>
struct EncoderParams {
  ConvStack<S> convs;
  Tensor<S> fc_w, fc_b;

  static EncoderParams init(int height, int width, int embedding_dim, Rng rng);

  int height() const { return convs.shape.height; }
  int width() const { return convs.shape.width; }
  int embedding_dim() const { return static_cast<int>(fc_w.dim(0)); }

  /// Parameter handles (sharing storage) in a fixed order.
  std::vector<Tensor<S>> parameters() const;
  static std::vector<std::string> parameter_names();
  Index parameter_count() const;
  /// Deep copy converted to another scalar type.
  template <typename To>
  EncoderParams<To> cast() const;
};

/// frames [n×h×w] -> unit-norm embeddings [n×dim]. Throws DimensionError on a size mismatch.
template <typename S>
Tensor<S> encode_batch(GradTape<S>& tape, const EncoderParams<S>& params, const Tensor<S>& frames);

/// Single frame -> unit-norm embedding.
Eigen::VectorXf encode(const EncoderParams<float>& params, const Observation& obs);

/// Embeds many frames without gradient tracking; row i is frame i.
Eigen::MatrixXf encode_frames(const EncoderParams<float>& params, std::span<const Observation> frames);
/// Same, for frames already packed as rows of h*w pixels.
Eigen::MatrixXf encode_rows(const EncoderParams<float>& params,
                            const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& rows);

template <typename S>
template <typename To>
EncoderParams<To> EncoderParams<S>::cast() const {
  EncoderParams<To> out;
  out.convs.shape = convs.shape;
  out.convs.conv1_w = tensor_cast<To>(convs.conv1_w);
  out.convs.conv1_b = tensor_cast<To>(convs.conv1_b);
  out.convs.conv2_w = tensor_cast<To>(convs.conv2_w);
  out.convs.conv2_b = tensor_cast<To>(convs.conv2_b);
  out.fc_w = tensor_cast<To>(fc_w);
  out.fc_b = tensor_cast<To>(fc_b);
  for (auto& p : out.parameters()) p.set_requires_grad(true);
  return out;
}

}  // namespace tempal
