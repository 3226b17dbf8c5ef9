#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "vlrr/data.hpp"
#include "vlrr/models.hpp"
#include "vlrr/tensor.hpp"

namespace vlrr {

/// Named f64 tensors plus aliases (extra names resolving to an entry).
///
/// Little-endian layout:
///   magic (4 bytes) | u8 version=1 | u32 entry count
///   | per entry: u16 name length, name, u8 rank, rank * u32 extents, f64 values
///   | u32 alias count | per alias: u16 name length, name, u32 entry index
struct TensorArchive {
    std::vector<std::pair<std::string, Tensor>> entries;
    std::vector<std::pair<std::string, std::size_t>> aliases;

    void add(std::string name, Tensor tensor);
    void add_alias(std::string name, std::string_view target);

    // Resolves entry names and aliases; nullptr when absent.
    const Tensor* find(std::string_view name) const;
    // Throws FormatError when absent.
    const Tensor& get(std::string_view name) const;
    bool contains(std::string_view name) const { return find(name) != nullptr; }
};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic);
TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic);

// ----------------------------- checkpoints -----------------------------
//
// "VLRC" archives. Entry names follow parameters(); "meta.config" holds
// (n1, n2, n3, f1, f2, f3, m4, m5, f4, height, width) and every tensor shape
// is checked against it on load. In dual checkpoints each shared tensor is stored once
// as conv{i}.shared.* and reachable as lr.conv{i}.shared.* and
// hr.conv{i}.shared.* through aliases.

using AnyNetwork = std::variant<SingleNetwork, DualNetwork>;

std::vector<std::uint8_t> encode_checkpoint(const SingleNetwork& net);
std::vector<std::uint8_t> encode_checkpoint(const DualNetwork& net);
AnyNetwork decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const SingleNetwork& net, const std::filesystem::path& path);
void save_checkpoint(const DualNetwork& net, const std::filesystem::path& path);
AnyNetwork load_checkpoint(const std::filesystem::path& path);

// ----------------------------- pair archives -----------------------------
//
// "VLRP" archives holding a PairSet: lr, hr, mean, scale, labels, classes.

std::vector<std::uint8_t> encode_pair_set(const PairSet& pairs);
PairSet decode_pair_set(std::span<const std::uint8_t> bytes);

} // namespace vlrr
