#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "tempal/alignment/encoder.hpp"
#include "tempal/numcore/adam.hpp"

namespace tempal {

using FrameRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AlignmentConfig {
  int temporal_window = 4;   // L
  double temperature = 0.1;  // tau
  int batch_size = 2048;     // K, two frames per pair
  double learning_rate = 2e-4;
  int max_shift = -1;        // < 0: default_max_shift(height)
  int embedding_dim = 32;
  int store_capacity = 5120;
  int n_encoder_epochs = 1;
  int n_pretrain_epochs = 2500;

  void validate() const;
  int resolved_max_shift(int height) const { return max_shift < 0 ? default_max_shift(height) : max_shift; }
  friend bool operator==(const AlignmentConfig&, const AlignmentConfig&) = default;
};

/// Translates by (dx, dy) pixels (x = column, y = row), zero-filling vacated pixels.
Observation shift_frame(const Observation& obs, int dx, int dy);

/// shift_frame with dx, dy each uniform in [-max_shift, max_shift].
/// Requires max_shift < min(h, w) / 2 (ContractError otherwise).
Observation augment_shift(const Observation& obs, int max_shift, Rng& rng);

struct FrameTag {
  std::uint64_t trajectory = 0;
  std::int32_t step = 0;
  friend bool operator==(const FrameTag&, const FrameTag&) = default;
};

/// Ring buffer of frames tagged with (trajectory id, step within trajectory).
/// The oldest frame is evicted first.
class ObservationStore {
 public:
  ObservationStore(int capacity, int height, int width);

  void push(const Observation& obs, FrameTag tag);
  /// Same as push for a frame given as h*w contiguous pixels.
  void push_row(const float* pixels, FrameTag tag);

  int size() const { return size_; }
  int capacity() const { return capacity_; }
  int height() const { return height_; }
  int width() const { return width_; }

  /// Slot of a tagged frame, or -1.
  int find(FrameTag tag) const;
  const FrameTag& tag(int slot) const { return tags_.at(std::size_t(slot)); }
  Eigen::Map<const Observation> frame(int slot) const;
  const float* pixels(int slot) const { return frames_.data() + std::size_t(slot) * std::size_t(height_ * width_); }

  /// Slots s whose (trajectory, step + k) is also stored.
  const std::vector<int>& anchors_with_offset(int k) const;

  // Raw state for checkpointing.
  const FrameRows& frame_rows() const { return frames_; }
  const std::vector<FrameTag>& tags() const { return tags_; }
  int head() const { return head_; }
  void restore(FrameRows frames, std::vector<FrameTag> tags, int head, int size);

 private:
  static std::uint64_t key(FrameTag t) { return (t.trajectory << 24) ^ std::uint64_t(std::uint32_t(t.step)); }
  void rebuild_index();

  int capacity_, height_, width_;
  FrameRows frames_;
  std::vector<FrameTag> tags_;
  int head_ = 0;  // next slot to write
  int size_ = 0;
  std::unordered_map<std::uint64_t, int> index_;
  std::uint64_t version_ = 0;
  mutable std::uint64_t anchors_version_ = ~std::uint64_t{0};
  mutable std::vector<std::vector<int>> anchors_;
};

/// K/2 anchor-positive pairs. Rows [0, K/2) of `frames` are anchors, rows
/// [K/2, K) their positives, both already augmented.
struct PairBatch {
  FrameRows frames;
  std::vector<int> offsets;           // k_i in [1, L]
  std::vector<FrameTag> anchor_tags;  // positive tag = anchor tag with step + k
  int n_pairs() const { return static_cast<int>(offsets.size()); }
  /// positive_index for alignment_loss: i <-> i + K/2.
  std::vector<int> positive_index() const;
};

/// Throws CapacityError when no stored trajectory is longer than L.
PairBatch sample_pairs(const ObservationStore& store, const AlignmentConfig& cfg, Rng& rng);

/// Mean over the K batch members of -log(exp(z_i.z_j/tau) / sum_{k != i} exp(z_i.z_k/tau)),
/// j = positive_index[i]. Z is [K×d]; K >= 2 (ContractError otherwise).
template <typename S>
Tensor<S> alignment_loss(GradTape<S>& tape, const Tensor<S>& z, std::span<const int> positive_index, S temperature);

/// n_epochs passes of ceil(store.size() / (batch_size/2)) Adam steps each.
/// Returns the mean batch loss.
double update_encoder(EncoderParams<float>& params, const ObservationStore& store, const AlignmentConfig& cfg,
                      AdamState<float>& opt, int n_epochs, Rng& rng);

/// Mean cosine similarity over pairs at distance 1..L minus the mean over
/// >= 1000 random pairs at distance > 4L. Requires more than 4L + 1 frames.
double alignment_score(const EncoderParams<float>& params, std::span<const Observation> trajectory, int window,
                       Rng& rng);
/// Same, on precomputed embeddings (rows).
double alignment_score(const Eigen::MatrixXf& embeddings, int window, Rng& rng);

}  // namespace tempal
