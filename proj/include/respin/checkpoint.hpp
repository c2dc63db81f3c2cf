#pragma once

// Checkpoint container: a JSON manifest plus one raw little-endian 64-bit
// float blob per tensor (row-major element order). Round-trips are
// bit-exact; every file gets a sha256 recorded in the manifest and the
// directory-level sidecar. Writes are atomic (temp + rename).

#include "respin/calibrate.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace respin {

std::string sha256_hex(const void* data, size_t len);
std::string sha256_file(const std::filesystem::path& p);

void write_file_atomic(const std::filesystem::path& p, const std::string& content);

// filename -> sha256 of every regular file in dir, written to
// dir/hashes.json (itself excluded).
void write_hashes_sidecar(const std::filesystem::path& dir);

void save_model(const std::filesystem::path& dir, const ToyTransformer& model,
                const std::string& note = "");
ToyTransformer load_model(const std::filesystem::path& dir);

void save_rotations(const std::filesystem::path& dir, const RotationSet& rots,
                    uint64_t init_seed);
struct LoadedRotations {
  RotationSet rots;
  uint64_t init_seed;
};
LoadedRotations load_rotations(const std::filesystem::path& dir);

}  // namespace respin
