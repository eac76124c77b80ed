#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fmc/types.hpp"

// ".fmb" token container: a 20-byte little-endian header followed by the
// tokens packed MSB-first at ceil(log2 K) bits each.
namespace fmc {

struct StreamHeader {
  static constexpr char magic[4] = {'F', 'M', 'B', '1'};
  static constexpr std::uint8_t current_version = 1;
  static constexpr std::size_t size_bytes = 20;

  std::uint8_t version = current_version;
  std::uint32_t sample_rate = 16000;
  std::uint16_t hop = 160;
  std::uint8_t downsample = 4;
  std::uint16_t codebook_size = 1024;
  std::uint8_t mel_bins = 80;
  std::uint32_t token_count = 0;
  std::uint8_t pad_frames = 0;

  unsigned bits_per_token() const;
  std::size_t payload_bytes() const;
  double payload_bitrate() const; // bits per second of audio
};

unsigned bits_for(Index K);

std::vector<std::uint8_t> pack_tokens(std::span<const Index> tokens, Index K);
std::vector<Index> unpack_tokens(std::span<const std::uint8_t> payload,
                                 const StreamHeader &header);

std::vector<std::uint8_t> serialize_stream(const StreamHeader &header,
                                           std::span<const Index> tokens);
// Returns the header; tokens go to `tokens`. Nothing is written on error.
StreamHeader parse_stream(std::span<const std::uint8_t> bytes,
                          std::vector<Index> &tokens);

void write_stream(const std::filesystem::path &path, const StreamHeader &header,
                  std::span<const Index> tokens);
StreamHeader read_stream(const std::filesystem::path &path,
                         std::vector<Index> &tokens);

} // namespace fmc
