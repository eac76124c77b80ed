#include "fmc/bitstream.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace fmc {

namespace {

template <typename T> void put_le(std::vector<std::uint8_t> &out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T> T get_le(std::span<const std::uint8_t> in, std::size_t &pos) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

} // namespace

unsigned bits_for(Index K) {
  if (K < 2 || K > 65535)
    throw std::invalid_argument("codebook size " + std::to_string(K) +
                                " outside [2, 65535]");
  unsigned bits = 0;
  while ((Index{1} << bits) < K)
    ++bits;
  return bits;
}

unsigned StreamHeader::bits_per_token() const { return bits_for(codebook_size); }

std::size_t StreamHeader::payload_bytes() const {
  return (static_cast<std::size_t>(token_count) * bits_per_token() + 7) / 8;
}

double StreamHeader::payload_bitrate() const {
  // Each token covers downsample * hop samples.
  return static_cast<double>(sample_rate) /
         (static_cast<double>(downsample) * hop) * bits_per_token();
}

std::vector<std::uint8_t> pack_tokens(std::span<const Index> tokens, Index K) {
  const unsigned bits = bits_for(K);
  std::vector<std::uint8_t> out((tokens.size() * bits + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (Index t : tokens) {
    if (t < 0 || t >= K)
      throw std::out_of_range("pack_tokens: token " + std::to_string(t) +
                              " outside [0, " + std::to_string(K) + ")");
    for (int b = static_cast<int>(bits) - 1; b >= 0; --b, ++bitpos)
      if ((t >> b) & 1)
        out[bitpos / 8] |= static_cast<std::uint8_t>(0x80u >> (bitpos % 8));
  }
  return out;
}

std::vector<Index> unpack_tokens(std::span<const std::uint8_t> payload,
                                 const StreamHeader &header) {
  const unsigned bits = header.bits_per_token();
  if (payload.size() != header.payload_bytes())
    throw std::runtime_error("unpack_tokens: payload is " + std::to_string(payload.size()) +
                             " bytes, header implies " +
                             std::to_string(header.payload_bytes()));
  std::vector<Index> tokens(header.token_count);
  std::size_t bitpos = 0;
  for (Index &t : tokens) {
    Index v = 0;
    for (unsigned b = 0; b < bits; ++b, ++bitpos)
      v = (v << 1) | ((payload[bitpos / 8] >> (7 - bitpos % 8)) & 1);
    if (v >= header.codebook_size)
      throw std::runtime_error("unpack_tokens: token " + std::to_string(v) +
                               " >= K = " + std::to_string(header.codebook_size));
    t = v;
  }
  return tokens;
}

std::vector<std::uint8_t> serialize_stream(const StreamHeader &header,
                                           std::span<const Index> tokens) {
  if (header.token_count != tokens.size())
    throw std::invalid_argument("serialize_stream: token_count does not match tokens");
  std::vector<std::uint8_t> out(std::begin(StreamHeader::magic), std::end(StreamHeader::magic));
  put_le(out, header.version);
  put_le(out, header.sample_rate);
  put_le(out, header.hop);
  put_le(out, header.downsample);
  put_le(out, header.codebook_size);
  put_le(out, header.mel_bins);
  put_le(out, header.token_count);
  put_le(out, header.pad_frames);
  auto payload = pack_tokens(tokens, header.codebook_size);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

StreamHeader parse_stream(std::span<const std::uint8_t> bytes,
                          std::vector<Index> &tokens) {
  if (bytes.size() < StreamHeader::size_bytes)
    throw std::runtime_error("stream truncated: " + std::to_string(bytes.size()) +
                             " bytes, header needs 20");
  if (std::memcmp(bytes.data(), StreamHeader::magic, 4) != 0)
    throw std::runtime_error("not an FMB1 stream (bad magic)");
  StreamHeader h;
  std::size_t pos = 4;
  h.version = get_le<std::uint8_t>(bytes, pos);
  if (h.version != StreamHeader::current_version)
    throw std::runtime_error("unsupported stream version " + std::to_string(h.version));
  h.sample_rate = get_le<std::uint32_t>(bytes, pos);
  h.hop = get_le<std::uint16_t>(bytes, pos);
  h.downsample = get_le<std::uint8_t>(bytes, pos);
  h.codebook_size = get_le<std::uint16_t>(bytes, pos);
  h.mel_bins = get_le<std::uint8_t>(bytes, pos);
  h.token_count = get_le<std::uint32_t>(bytes, pos);
  h.pad_frames = get_le<std::uint8_t>(bytes, pos);
  if (h.codebook_size < 2)
    throw std::runtime_error("stream header has K < 2");
  if (h.sample_rate == 0 || h.hop == 0 || h.downsample == 0)
    throw std::runtime_error("stream header has zero frame geometry");
  tokens = unpack_tokens(bytes.subspan(pos), h);
  return h;
}

void write_stream(const std::filesystem::path &path, const StreamHeader &header,
                  std::span<const Index> tokens) {
  const auto bytes = serialize_stream(header, tokens);
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw std::runtime_error("write failed: " + path.string());
}

StreamHeader read_stream(const std::filesystem::path &path,
                         std::vector<Index> &tokens) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_stream(bytes, tokens);
}

} // namespace fmc
