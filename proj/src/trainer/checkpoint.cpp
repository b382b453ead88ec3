#include "tempal/trainer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tempal {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::vector<std::uint32_t> pack_u64(std::span<const std::uint64_t> values) {
  std::vector<std::uint32_t> words;
  words.reserve(values.size() * 2);
  for (std::uint64_t v : values) {
    words.push_back(std::uint32_t(v));
    words.push_back(std::uint32_t(v >> 32));
  }
  return words;
}

class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  void read(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    read(&v, sizeof v, what);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

void append(std::vector<char>& out, const void* src, std::size_t n) {
  const char* p = static_cast<const char*>(src);
  out.insert(out.end(), p, p + n);
}

void append_u32(std::vector<char>& out, std::uint32_t v) { append(out, &v, sizeof v); }

}  // namespace

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return true;
  return false;
}

const CheckpointRecord& Checkpoint::record(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return r;
  throw FormatError("checkpoint has no record '" + name + "'");
}

void Checkpoint::add(CheckpointRecord record) {
  if (contains(record.name)) throw ContractError("checkpoint: duplicate record '" + record.name + "'");
  std::size_t n = 1;
  for (auto d : record.dims) n *= d;
  if (n != record.words.size()) throw ContractError("checkpoint: record '" + record.name + "' size mismatch");
  records_.push_back(std::move(record));
}

void Checkpoint::add_tensor(const std::string& name, const Tensorf& t) {
  CheckpointRecord r{name, {}, std::vector<std::uint32_t>(std::size_t(t.size()))};
  for (Index d : t.shape()) r.dims.push_back(std::uint32_t(d));
  std::memcpy(r.words.data(), t.raw(), r.words.size() * sizeof(float));
  add(std::move(r));
}

void Checkpoint::add_floats(const std::string& name, std::span<const float> values) {
  CheckpointRecord r{name, {std::uint32_t(values.size())}, std::vector<std::uint32_t>(values.size())};
  std::memcpy(r.words.data(), values.data(), values.size() * sizeof(float));
  add(std::move(r));
}

void Checkpoint::add_u64(const std::string& name, std::span<const std::uint64_t> values) {
  add({name, {std::uint32_t(values.size()), 2}, pack_u64(values)});
}

void Checkpoint::add_text(const std::string& name, const std::string& text) {
  std::vector<std::uint32_t> words(1 + (text.size() + 3) / 4, 0);
  words[0] = std::uint32_t(text.size());
  std::memcpy(words.data() + 1, text.data(), text.size());
  add({name, {std::uint32_t(words.size())}, std::move(words)});
}

void Checkpoint::add_rng(const std::string& name, const Rng& rng) {
  const std::uint64_t v[2] = {rng.key(), rng.counter()};
  add_u64(name, v);
}

void Checkpoint::add_adam(const std::string& prefix, const AdamState<float>& state) {
  const std::uint64_t step = std::uint64_t(state.step);
  add_u64(prefix + ".step", std::span(&step, 1));
  for (std::size_t i = 0; i < state.first_moment.size(); ++i) {
    const auto& m = state.first_moment[i];
    const auto& v = state.second_moment[i];
    add_floats(prefix + ".m" + std::to_string(i), std::span<const float>(m.data(), std::size_t(m.size())));
    add_floats(prefix + ".v" + std::to_string(i), std::span<const float>(v.data(), std::size_t(v.size())));
  }
}

void Checkpoint::read_tensor(const std::string& name, Tensorf& t) const {
  const auto& r = record(name);
  bool same = r.dims.size() == t.shape().size();
  for (std::size_t i = 0; same && i < r.dims.size(); ++i) same = Index(r.dims[i]) == t.shape()[i];
  if (!same) throw FormatError("checkpoint record '" + name + "' has shape that does not match " + shape_str(t.shape()));
  std::memcpy(t.raw(), r.words.data(), r.words.size() * sizeof(float));
}

Tensorf Checkpoint::tensor(const std::string& name) const {
  const auto& r = record(name);
  Shape shape;
  for (auto d : r.dims) shape.push_back(Index(d));
  Tensorf t(shape);
  std::memcpy(t.raw(), r.words.data(), r.words.size() * sizeof(float));
  return t;
}

std::vector<float> Checkpoint::floats(const std::string& name) const {
  const auto& r = record(name);
  std::vector<float> out(r.words.size());
  std::memcpy(out.data(), r.words.data(), r.words.size() * sizeof(float));
  return out;
}

std::vector<std::uint64_t> Checkpoint::u64(const std::string& name) const {
  const auto& r = record(name);
  if (r.dims.size() != 2 || r.dims[1] != 2) throw FormatError("checkpoint record '" + name + "' is not a u64 list");
  std::vector<std::uint64_t> out(r.dims[0]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r.words[2 * i] | (std::uint64_t(r.words[2 * i + 1]) << 32);
  return out;
}

std::uint64_t Checkpoint::u64_scalar(const std::string& name) const {
  const auto v = u64(name);
  if (v.size() != 1) throw FormatError("checkpoint record '" + name + "' is not a scalar");
  return v[0];
}

std::string Checkpoint::text(const std::string& name) const {
  const auto& r = record(name);
  if (r.words.empty() || r.words[0] > (r.words.size() - 1) * 4) {
    throw FormatError("checkpoint record '" + name + "' is not text");
  }
  std::string s(r.words[0], '\0');
  std::memcpy(s.data(), r.words.data() + 1, s.size());
  return s;
}

Rng Checkpoint::rng(const std::string& name) const {
  const auto v = u64(name);
  if (v.size() != 2) throw FormatError("checkpoint record '" + name + "' is not a random stream");
  return Rng(v[0], v[1]);
}

AdamState<float> Checkpoint::adam(const std::string& prefix, std::span<const Tensorf> params) const {
  AdamState<float> state(AdamConfig{}, params);
  state.step = std::int64_t(u64_scalar(prefix + ".step"));
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto [tag, target] : {std::pair{".m", &state.first_moment[i]}, std::pair{".v", &state.second_moment[i]}}) {
      const auto values = floats(prefix + tag + std::to_string(i));
      if (Index(values.size()) != target->size()) {
        throw FormatError("checkpoint optimizer record '" + prefix + tag + std::to_string(i) + "' has the wrong size");
      }
      *target = Eigen::Map<const Eigen::VectorXf>(values.data(), Index(values.size()));
    }
  }
  return state;
}

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<char> out;
  append(out, kCheckpointMagic, 4);
  append_u32(out, kCheckpointVersion);
  for (const auto& r : ckpt.records()) {
    append_u32(out, std::uint32_t(r.name.size()));
    append(out, r.name.data(), r.name.size());
    append_u32(out, std::uint32_t(r.dims.size()));
    for (auto d : r.dims) append_u32(out, d);
    append(out, r.words.data(), r.words.size() * sizeof(std::uint32_t));
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const char> bytes) {
  Reader in(bytes);
  char magic[4];
  in.read(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  while (!in.done()) {
    CheckpointRecord r;
    const std::uint32_t name_len = in.u32("record name length");
    if (name_len > in.remaining()) throw FormatError("checkpoint truncated while reading record name");
    r.name.resize(name_len);
    in.read(r.name.data(), name_len, "record name");
    const std::uint32_t rank = in.u32("record rank");
    if (std::size_t(rank) * 4 > in.remaining()) throw FormatError("checkpoint truncated in '" + r.name + "' dims");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.dims.push_back(in.u32("record dims"));
      n *= r.dims.back();
    }
    if (n > in.remaining() / 4) throw FormatError("checkpoint truncated in '" + r.name + "' data");
    r.words.resize(n);
    in.read(r.words.data(), n * 4, "record data");
    if (ckpt.contains(r.name)) throw FormatError("checkpoint has duplicate record '" + r.name + "'");
    ckpt.add(std::move(r));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const UnsupportedVersionError& e) {
    throw UnsupportedVersionError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tempal
