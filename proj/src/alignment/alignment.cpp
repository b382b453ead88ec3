#include "tempal/alignment/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>

namespace tempal {

void AlignmentConfig::validate() const {
  if (temporal_window < 1) throw ConfigError("align.temporal_window must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("align.temperature must be > 0");
  if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("align.batch_size must be even and >= 2");
  if (learning_rate < 0.0) throw ConfigError("align.learning_rate must be >= 0");
  if (embedding_dim < 1) throw ConfigError("align.embedding_dim must be >= 1");
  if (store_capacity < 2) throw ConfigError("align.store_capacity must be >= 2");
  if (n_encoder_epochs < 0 || n_pretrain_epochs < 0) throw ConfigError("align epoch counts must be >= 0");
}

// ---------------------------------------------------------------- augmentation

Observation shift_frame(const Observation& obs, int dx, int dy) {
  const int h = int(obs.rows()), w = int(obs.cols());
  Observation out = Observation::Zero(h, w);
  const int rows = h - std::abs(dy), cols = w - std::abs(dx);
  if (rows <= 0 || cols <= 0) return out;
  out.block(std::max(dy, 0), std::max(dx, 0), rows, cols) = obs.block(std::max(-dy, 0), std::max(-dx, 0), rows, cols);
  return out;
}

Observation augment_shift(const Observation& obs, int max_shift, Rng& rng) {
  if (max_shift < 0 || 2 * max_shift >= std::min(obs.rows(), obs.cols())) {
    throw ContractError("augment_shift: max_shift " + std::to_string(max_shift) + " must be in [0, min(h,w)/2)");
  }
  if (max_shift == 0) return obs;
  const int dx = int(rng.uniform_int(-max_shift, max_shift));
  const int dy = int(rng.uniform_int(-max_shift, max_shift));
  return shift_frame(obs, dx, dy);
}

// ---------------------------------------------------------------- store

ObservationStore::ObservationStore(int capacity, int height, int width)
    : capacity_(capacity), height_(height), width_(width) {
  if (capacity < 1) throw ConfigError("observation store capacity must be >= 1");
  frames_.setZero(capacity, Index(height) * width);
  tags_.resize(std::size_t(capacity));
}

void ObservationStore::push(const Observation& obs, FrameTag tag) {
  if (obs.rows() != height_ || obs.cols() != width_) {
    throw DimensionError("observation store holds " + std::to_string(height_) + "x" + std::to_string(width_) +
                         " frames, got " + std::to_string(obs.rows()) + "x" + std::to_string(obs.cols()));
  }
  push_row(obs.data(), tag);
}

void ObservationStore::push_row(const float* pixels, FrameTag tag) {
  if (size_ == capacity_) index_.erase(key(tags_[std::size_t(head_)]));
  frames_.row(head_) = Eigen::Map<const Eigen::RowVectorXf>(pixels, frames_.cols());
  tags_[std::size_t(head_)] = tag;
  index_[key(tag)] = head_;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
  ++version_;
}

int ObservationStore::find(FrameTag tag) const {
  auto it = index_.find(key(tag));
  return it == index_.end() || !(tags_[std::size_t(it->second)] == tag) ? -1 : it->second;
}

Eigen::Map<const Observation> ObservationStore::frame(int slot) const {
  if (slot < 0 || slot >= size_) throw ContractError("observation store: slot out of range");
  return Eigen::Map<const Observation>(pixels(slot), height_, width_);
}

const std::vector<int>& ObservationStore::anchors_with_offset(int k) const {
  if (k < 1) throw ContractError("anchors_with_offset: k must be >= 1");
  if (anchors_version_ != version_) {
    anchors_.clear();
    anchors_version_ = version_;
  }
  if (anchors_.size() < std::size_t(k)) anchors_.resize(std::size_t(k));
  auto& list = anchors_[std::size_t(k - 1)];
  if (list.empty()) {
    list.reserve(std::size_t(size_));
    for (int s = 0; s < size_; ++s) {
      FrameTag t = tags_[std::size_t(s)];
      t.step += k;
      if (find(t) >= 0) list.push_back(s);
    }
    if (list.empty()) list.push_back(-1);  // cached "none" marker
  }
  static const std::vector<int> none;
  return list.front() < 0 ? none : list;
}

void ObservationStore::restore(FrameRows frames, std::vector<FrameTag> tags, int head, int size) {
  if (frames.rows() != capacity_ || frames.cols() != Index(height_) * width_ || int(tags.size()) != capacity_ ||
      head < 0 || head >= capacity_ || size < 0 || size > capacity_) {
    throw FormatError("observation store: inconsistent saved state");
  }
  frames_ = std::move(frames);
  tags_ = std::move(tags);
  head_ = head;
  size_ = size;
  rebuild_index();
}

void ObservationStore::rebuild_index() {
  index_.clear();
  // Oldest to newest, so a duplicate tag resolves to the newest slot as in push().
  const int start = size_ == capacity_ ? head_ : 0;
  for (int i = 0; i < size_; ++i) {
    const int s = (start + i) % capacity_;
    index_[key(tags_[std::size_t(s)])] = s;
  }
  ++version_;
}

// ---------------------------------------------------------------- pairs

std::vector<int> PairBatch::positive_index() const {
  const int p = n_pairs();
  std::vector<int> idx(std::size_t(2 * p));
  for (int i = 0; i < p; ++i) {
    idx[std::size_t(i)] = i + p;
    idx[std::size_t(i + p)] = i;
  }
  return idx;
}

PairBatch sample_pairs(const ObservationStore& store, const AlignmentConfig& cfg, Rng& rng) {
  const int window = cfg.temporal_window;
  for (int k = 1; k <= window; ++k) {
    if (store.anchors_with_offset(k).empty()) {
      throw CapacityError("sample_pairs: no stored trajectory spans " + std::to_string(k) + " steps (L = " +
                          std::to_string(window) + ", store size " + std::to_string(store.size()) + ")");
    }
  }
  const int n_pairs = cfg.batch_size / 2;
  const int max_shift = cfg.resolved_max_shift(store.height());
  const Index hw = Index(store.height()) * store.width();
  PairBatch b;
  b.frames.resize(2 * n_pairs, hw);
  b.offsets.resize(std::size_t(n_pairs));
  b.anchor_tags.resize(std::size_t(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const int k = int(rng.uniform_int(1, window));
    const auto& anchors = store.anchors_with_offset(k);
    const int a = anchors[std::size_t(rng.uniform_int(0, std::int64_t(anchors.size()) - 1))];
    FrameTag pos_tag = store.tag(a);
    pos_tag.step += k;
    const int p = store.find(pos_tag);
    b.offsets[std::size_t(i)] = k;
    b.anchor_tags[std::size_t(i)] = store.tag(a);
    const Observation anchor = augment_shift(Observation(store.frame(a)), max_shift, rng);
    const Observation positive = augment_shift(Observation(store.frame(p)), max_shift, rng);
    b.frames.row(i) = Eigen::Map<const Eigen::RowVectorXf>(anchor.data(), hw);
    b.frames.row(i + n_pairs) = Eigen::Map<const Eigen::RowVectorXf>(positive.data(), hw);
  }
  return b;
}

// ---------------------------------------------------------------- loss

namespace {

template <typename S>
using RowMajorMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ColMajorMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

constexpr Index kStrip = 128;

template <typename S>
S positive_logits(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs, std::span<const int> pos) {
  S sum = 0;
  for (Index i = 0; i < zr.rows(); ++i) sum += zs.row(i).dot(zr.row(pos[std::size_t(i)]));
  return sum;
}

// Logits L = zs zr^T are symmetric. With one shift m >= max L, E = exp(L - m)
// (zero diagonal) is shared by every row, so only strips of the upper triangle
// are formed: strip J holds rows [0, end of J) of columns J.
template <typename S>
struct SharedShift {
  S total = 0, shift = 0;
  Vec<S> inv_sum;
};

template <typename S, typename F>
void for_each_strip(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs, S shift, F&& f) {
  const Index k = zr.rows();
  ColMajorMat<S> strip(k, kStrip);
  for (Index j0 = 0; j0 < k; j0 += kStrip) {
    const Index b = std::min(kStrip, k - j0);
    auto e = strip.topLeftCorner(j0 + b, b);
    e.noalias() = zs.topRows(j0 + b) * zr.middleRows(j0, b).transpose();
    e = (e.array() - shift).exp();
    for (Index q = 0; q < b; ++q) e(j0 + q, q) = 0;
    f(j0, b, e);
  }
}

template <typename S>
std::optional<SharedShift<S>> shared_shift_loss(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs,
                                                std::span<const int> pos, S temperature) {
  SharedShift<S> st;
  st.shift = zr.rowwise().squaredNorm().maxCoeff() / temperature;
  Vec<S> sums = Vec<S>::Zero(zr.rows());
  for_each_strip(zr, zs, st.shift, [&](Index j0, Index b, const auto& e) {
    sums.segment(j0, b) += e.colwise().sum().transpose();
    sums.head(j0) += e.topRows(j0).rowwise().sum();
  });
  // Every sum must stay well inside the normal range, or the shared shift lost
  // too much; the caller then falls back to per-row shifts.
  if (!(sums.minCoeff() > S(1e-30))) return std::nullopt;
  st.total = S(zr.rows()) * st.shift + sums.array().log().sum() - positive_logits(zr, zs, pos);
  st.inv_sum = sums.cwiseInverse();
  return st;
}

// (P + P^T) Z = E (r Z) + r (E Z) with r = 1 / row sums.
template <typename S>
void shared_shift_gradient(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs, const SharedShift<S>& st,
                           RowMajorMat<S>& dz) {
  const Index k = zr.rows(), d = zr.cols();
  RowMajorMat<S> y(k, 2 * d);
  y.leftCols(d) = st.inv_sum.asDiagonal() * zr;
  y.rightCols(d) = zr;
  RowMajorMat<S> acc = RowMajorMat<S>::Zero(k, 2 * d);
  for_each_strip(zr, zs, st.shift, [&](Index j0, Index b, const auto& e) {
    acc.middleRows(j0, b).noalias() += e.transpose() * y.topRows(j0 + b);
    acc.topRows(j0).noalias() += e.topRows(j0) * y.middleRows(j0, b);
  });
  dz += acc.leftCols(d) + st.inv_sum.asDiagonal() * acc.rightCols(d);
}

template <typename S>
struct ExactLoss {
  S total = 0;
  Vec<S> lse;
};

// Per-row shifts, one column block at a time; column i is anchor i's row.
template <typename S>
ExactLoss<S> exact_loss(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs, std::span<const int> pos) {
  const Index k = zr.rows();
  ExactLoss<S> out;
  out.lse.resize(k);
  ColMajorMat<S> blk(k, kStrip);
  for (Index j0 = 0; j0 < k; j0 += kStrip) {
    const Index b = std::min(kStrip, k - j0);
    auto cols = blk.leftCols(b);
    cols.noalias() = zs * zr.middleRows(j0, b).transpose();
    for (Index q = 0; q < b; ++q) {
      auto col = cols.col(q);
      col(j0 + q) = -std::numeric_limits<S>::infinity();
      const S m = col.maxCoeff();
      out.lse(j0 + q) = m + std::log((col.array() - m).exp().sum());
    }
  }
  out.total = out.lse.sum() - positive_logits(zr, zs, pos);
  return out;
}

template <typename S>
void exact_gradient(const RowMajorMat<S>& zr, const RowMajorMat<S>& zs, const Vec<S>& lse, RowMajorMat<S>& dz) {
  const Index k = zr.rows();
  ColMajorMat<S> blk(k, kStrip);
  for (Index j0 = 0; j0 < k; j0 += kStrip) {
    const Index b = std::min(kStrip, k - j0);
    auto cols = blk.leftCols(b);
    cols.noalias() = zs * zr.middleRows(j0, b).transpose();
    for (Index q = 0; q < b; ++q) {
      auto col = cols.col(q);
      col = (col.array() - lse(j0 + q)).exp();
      col(j0 + q) = 0;
    }
    dz.noalias() += cols * zr.middleRows(j0, b);
    dz.middleRows(j0, b).noalias() += cols.transpose() * zr;
  }
}

}  // namespace

template <typename S>
Tensor<S> alignment_loss(GradTape<S>& tape, const Tensor<S>& z, std::span<const int> positive_index, S temperature) {
  if (z.rank() != 2) throw DimensionError("alignment_loss: Z must be [K x d], got " + shape_str(z.shape()));
  const Index k = z.dim(0);
  if (k < 2) throw ContractError("alignment_loss: need K >= 2 embeddings, got " + std::to_string(k));
  if (Index(positive_index.size()) != k) {
    throw ContractError("alignment_loss: positive_index has " + std::to_string(positive_index.size()) +
                        " entries for K = " + std::to_string(k));
  }
  if (!(temperature > S(0))) throw ContractError("alignment_loss: temperature must be > 0");
  for (Index i = 0; i < k; ++i) {
    const int j = positive_index[std::size_t(i)];
    if (j < 0 || j >= k || j == i) {
      throw ContractError("alignment_loss: positive_index[" + std::to_string(i) + "] = " + std::to_string(j) +
                          " is invalid");
    }
  }
  const RowMajorMat<S> zr = z.matrix();
  const RowMajorMat<S> zs = zr / temperature;
  auto shared = shared_shift_loss(zr, zs, positive_index, temperature);
  std::function<void(RowMajorMat<S>&)> gradient;
  S total;
  if (shared) {
    total = shared->total;
    gradient = [zr, zs, state = std::move(*shared)](RowMajorMat<S>& dz) { shared_shift_gradient(zr, zs, state, dz); };
  } else {
    auto exact = exact_loss(zr, zs, positive_index);
    total = exact.total;
    gradient = [zr, zs, lse = std::move(exact.lse)](RowMajorMat<S>& dz) { exact_gradient(zr, zs, lse, dz); };
  }
  Tensor<S> out = Tensor<S>::scalar(total / S(k));
  if (tape.tracks(z)) {
    std::vector<int> pos(positive_index.begin(), positive_index.end());
    tape.record(out, [z = z, out, zr, gradient = std::move(gradient), pos = std::move(pos), temperature]() mutable {
      // dL/dZ = ((P + P^T) Z - onehot terms) / (K tau).
      const Index n = zr.rows();
      const S c = out.grad()(0) / (S(n) * temperature);
      RowMajorMat<S> dz = RowMajorMat<S>::Zero(n, zr.cols());
      gradient(dz);
      for (Index i = 0; i < n; ++i) {
        const Index j = pos[std::size_t(i)];
        dz.row(i) -= zr.row(j);
        dz.row(j) -= zr.row(i);
      }
      Eigen::Map<RowMajorMat<S>>(z.grad().data(), n, zr.cols()) += c * dz;
    });
  }
  return out;
}

template Tensor<float> alignment_loss(GradTape<float>&, const Tensor<float>&, std::span<const int>, float);
template Tensor<double> alignment_loss(GradTape<double>&, const Tensor<double>&, std::span<const int>, double);

// ---------------------------------------------------------------- training

double update_encoder(EncoderParams<float>& params, const ObservationStore& store, const AlignmentConfig& cfg,
                      AdamState<float>& opt, int n_epochs, Rng& rng) {
  if (store.size() == 0) throw CapacityError("update_encoder: observation store is empty");
  const int pairs = cfg.batch_size / 2;
  const int batches = (store.size() + pairs - 1) / pairs;
  opt.config.lr = cfg.learning_rate;
  auto parameters = params.parameters();
  double total = 0.0;
  int count = 0;
  for (int epoch = 0; epoch < n_epochs; ++epoch) {
    for (int b = 0; b < batches; ++b) {
      const PairBatch batch = sample_pairs(store, cfg, rng);
      Tensorf frames({Index(batch.frames.rows()), store.height(), store.width()});
      frames.data() = Eigen::Map<const Eigen::VectorXf>(batch.frames.data(), batch.frames.size());
      GradTape<float> tape;
      const auto z = encode_batch(tape, params, frames);
      const auto pos = batch.positive_index();
      const auto loss = alignment_loss(tape, z, pos, float(cfg.temperature));
      for (auto& p : parameters) p.zero_grad();
      tape.backward(loss);
      adam_step(std::span<Tensorf>(parameters), opt);
      total += loss.item();
      ++count;
    }
  }
  for (auto& p : parameters) p.zero_grad();
  return count > 0 ? total / count : 0.0;
}

double alignment_score(const Eigen::MatrixXf& e, int window, Rng& rng) {
  const Index t = e.rows();
  if (window < 1 || t <= 4 * Index(window) + 1) {
    throw ContractError("alignment_score: need more than 4L + 1 = " + std::to_string(4 * window + 1) +
                        " frames, got " + std::to_string(t));
  }
  double near = 0.0;
  Index n_near = 0;
  for (Index d = 1; d <= window; ++d) {
    for (Index i = 0; i + d < t; ++i) {
      near += e.row(i).dot(e.row(i + d));
      ++n_near;
    }
  }
  constexpr int kFarPairs = 2000;
  double far = 0.0;
  for (int n = 0; n < kFarPairs;) {
    const Index i = rng.uniform_int(0, t - 1), j = rng.uniform_int(0, t - 1);
    if (std::abs(i - j) <= 4 * Index(window)) continue;
    far += e.row(i).dot(e.row(j));
    ++n;
  }
  return near / double(n_near) - far / kFarPairs;
}

double alignment_score(const EncoderParams<float>& params, std::span<const Observation> trajectory, int window,
                       Rng& rng) {
  return alignment_score(encode_frames(params, trajectory), window, rng);
}

}  // namespace tempal
