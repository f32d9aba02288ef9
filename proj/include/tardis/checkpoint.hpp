#pragma once

#include "json.hpp"
#include "tardis/model.hpp"

#include <filesystem>

namespace tardis {

// A model plus free-form training metadata (role, train period, parent
// checkpoint fingerprint, train report, period mapping for classifiers).
struct ModelCheckpoint {
    Model model;
    nlohmann::json metadata = nlohmann::json::object();
};

// Binary container, all integers little-endian:
//   "TARDISCK"            8-byte magic
//   u32 version           currently 1
//   u32 header_length
//   header                UTF-8 JSON {"config", "metadata", "tensors":[{name,rows,cols}]}
//   f64 x parameter_count raw IEEE-754 parameters in tensor order
//   u32 crc32             zlib CRC-32 of every preceding byte
// Weights round-trip bitwise.
void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& checkpoint);
ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint");

} // namespace tardis
