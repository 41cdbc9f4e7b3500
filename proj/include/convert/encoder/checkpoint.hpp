#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "convert/encoder/encoder.hpp"
#include "convert/hash.hpp"
#include "convert/tokenizer/bpe.hpp"

namespace convert::model {

// Binary layout (little-endian):
//   "cvrt-ckpt-v1\n"
//   u64 config json length, config json
//   u64 vocab fingerprint
//   u64 tensor count, then per tensor:
//     u32 name length, name, u32 rank, u64 dims[rank], f32 data
//   u64 FNV-1a of everything above
inline constexpr std::string_view checkpoint_magic = "cvrt-ckpt-v1\n";
inline constexpr std::string_view checkpoint_magic_prefix = "cvrt-ckpt-";

namespace detail {

class ByteWriter {
 public:
  template <class V>
  void put(V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(V));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)).data(), sizeof(V));
    return v;
  }
  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) fail(ErrorCode::corrupt_file, "file is truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Encoder<float>& encoder) {
  detail::ByteWriter w;
  w.put_bytes(checkpoint_magic);
  const std::string config = nlohmann::json(encoder.config()).dump();
  w.put<std::uint64_t>(config.size());
  w.put_bytes(config);
  w.put<std::uint64_t>(encoder.vocab_fingerprint());
  w.put<std::uint64_t>(encoder.params().size());
  for (const auto& [name, t] : encoder.params()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)));
  }
  const std::uint64_t checksum = fnv1a(w.bytes());
  w.put<std::uint64_t>(checksum);
  return std::move(w.bytes());
}

// When `expected_vocab` is set the stored fingerprint must match it.
inline Encoder<float> parse_checkpoint(std::string_view bytes,
                                       std::optional<std::uint64_t> expected_vocab = std::nullopt) {
  if (bytes.substr(0, checkpoint_magic_prefix.size()) != checkpoint_magic_prefix) {
    fail(ErrorCode::corrupt_file, "not a checkpoint file");
  }
  if (bytes.size() < checkpoint_magic.size() + 8) fail(ErrorCode::corrupt_file, "file is truncated");
  if (bytes.substr(0, checkpoint_magic.size()) != checkpoint_magic) {
    fail(ErrorCode::version_mismatch, "unsupported checkpoint version");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a(body) != stored) fail(ErrorCode::corrupt_file, "checkpoint checksum mismatch");

  detail::ByteReader r(body);
  r.take(checkpoint_magic.size());
  EncoderConfig config;
  try {
    const auto len = r.get<std::uint64_t>();
    config = nlohmann::json::parse(r.take(len)).get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::corrupt_file, std::string("bad checkpoint config: ") + e.what());
  }
  const auto fingerprint = r.get<std::uint64_t>();
  if (expected_vocab && *expected_vocab != fingerprint) {
    fail(ErrorCode::fingerprint_mismatch, "checkpoint was trained with a different vocabulary");
  }
  const auto count = r.get<std::uint64_t>();
  nn::ParameterSet<float> params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 4) fail(ErrorCode::corrupt_file, "implausible tensor rank");
    nn::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    const std::size_t n = nn::shape_size(shape);
    if (n > r.remaining() / sizeof(float)) fail(ErrorCode::corrupt_file, "file is truncated");
    std::vector<float> data(n);
    std::memcpy(data.data(), r.take(n * sizeof(float)).data(), n * sizeof(float));
    params.add(name, nn::Tensor<float>(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) fail(ErrorCode::corrupt_file, "trailing bytes in checkpoint");
  return Encoder<float>(config, fingerprint, std::move(params));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a temporary file and renames it into place.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::io, "cannot rename " + tmp + ": " + ec.message());
}

inline void save_checkpoint(const Encoder<float>& encoder, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(encoder));
}

inline Encoder<float> load_checkpoint(const std::string& path,
                                      std::optional<std::uint64_t> expected_vocab = std::nullopt) {
  return parse_checkpoint(read_file(path), expected_vocab);
}

// A model directory holds model.ckpt and the vocab.bpe it was trained with.
struct Model {
  tok::BpeVocab vocab;
  Encoder<float> encoder;
  std::uint64_t fingerprint = 0;  // of the serialized checkpoint

  tok::TokenSequence encode(std::string_view text) const {
    return vocab.encode(text, encoder.config().max_sequence_length);
  }
};

// In-memory model with the fingerprint it would have once saved.
inline Model make_model(tok::BpeVocab vocab, Encoder<float> encoder) {
  if (vocab.fingerprint() != encoder.vocab_fingerprint()) {
    fail(ErrorCode::fingerprint_mismatch, "encoder and vocabulary do not belong together");
  }
  const std::uint64_t fp = fnv1a(serialize_checkpoint(encoder));
  return Model{std::move(vocab), std::move(encoder), fp};
}

inline std::string checkpoint_path(const std::string& dir) { return (std::filesystem::path(dir) / "model.ckpt").string(); }
inline std::string vocab_path(const std::string& dir) { return (std::filesystem::path(dir) / "vocab.bpe").string(); }

inline void save_model(const std::string& dir, const tok::BpeVocab& vocab, const Encoder<float>& encoder) {
  if (vocab.fingerprint() != encoder.vocab_fingerprint()) {
    fail(ErrorCode::fingerprint_mismatch, "encoder and vocabulary do not belong together");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create " + dir + ": " + ec.message());
  write_file_atomic(vocab_path(dir), vocab.serialize());
  save_checkpoint(encoder, checkpoint_path(dir));
}

inline Model load_model(const std::string& dir) {
  tok::BpeVocab vocab = tok::BpeVocab::load(vocab_path(dir));
  const std::string bytes = read_file(checkpoint_path(dir));
  Encoder<float> encoder = parse_checkpoint(bytes, vocab.fingerprint());
  if (encoder.config().vocab_size != vocab.size()) {
    fail(ErrorCode::config_mismatch, "checkpoint vocab_size differs from the vocabulary");
  }
  return Model{std::move(vocab), std::move(encoder), fnv1a(bytes)};
}

}  // namespace convert::model
