#pragma once

// Binary artifact container shared by every persisted type.
//
// Layout:
//   u64 LE  header length H
//   H bytes JSON header {magic, version, kind, scheme{m,M,d}, sections[], meta, digest}
//   zero padding to an 8-byte boundary
//   payload: little-endian float32 / uint32 sections at the offsets listed in the header
//
// The digest is FNV-1a 64 over kind, scheme, meta and payload bytes, so any two artifacts
// with the same digest are interchangeable downstream.

#include <bit>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpg/core.hpp"

namespace rpg {

static_assert(std::endian::native == std::endian::little,
              "artifact payloads are written in host order");

inline constexpr const char* kArtifactMagic = "RPG-ARTIFACT";
inline constexpr int kArtifactVersion = 1;

class ArtifactWriter {
 public:
  ArtifactWriter(std::string kind, SemanticScheme scheme);

  nlohmann::json& meta() { return meta_; }

  void add_f32(const std::string& name, std::vector<std::size_t> shape,
               std::span<const float> values);
  void add_u32(const std::string& name, std::vector<std::size_t> shape,
               std::span<const std::uint32_t> values);

  /// Digest the artifact will carry once written.
  std::uint64_t digest() const;

  /// Serialized bytes (header + payload).
  std::string bytes() const;

  /// Writes to a temporary sibling and renames over `path`. Returns the digest.
  std::uint64_t write(const std::string& path) const;

 private:
  struct Section {
    std::string name;
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<unsigned char> data;
  };
  void add(const std::string& name, const char* dtype, std::vector<std::size_t> shape,
           const void* data, std::size_t bytes, std::size_t count);
  nlohmann::json header() const;

  std::string kind_;
  SemanticScheme scheme_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<Section> sections_;
};

class Artifact {
 public:
  /// Throws ArtifactError when the file is missing, corrupt or of another kind.
  static Artifact read(const std::string& path, const std::string& expected_kind);
  static Artifact parse(const std::string& bytes, const std::string& expected_kind,
                        const std::string& origin = "<memory>");

  const std::string& kind() const { return kind_; }
  const SemanticScheme& scheme() const { return scheme_; }
  const nlohmann::json& meta() const { return meta_; }
  std::uint64_t digest() const { return digest_; }
  std::size_t header_bytes() const { return payload_offset_; }

  bool has(const std::string& name) const { return sections_.count(name) != 0; }
  const std::vector<std::size_t>& shape(const std::string& name) const;
  std::vector<float> f32(const std::string& name) const;
  std::vector<std::uint32_t> u32(const std::string& name) const;

  /// Reads a digest recorded in meta under `key`.
  std::uint64_t meta_digest(const std::string& key) const;

 private:
  struct Section {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t bytes = 0;
  };
  const Section& section(const std::string& name, const char* dtype) const;

  std::string origin_;
  std::string kind_;
  SemanticScheme scheme_;
  nlohmann::json meta_;
  std::uint64_t digest_ = 0;
  std::size_t payload_offset_ = 0;
  std::map<std::string, Section> sections_;
  std::string bytes_;
};

/// Writes `contents` to `path` via temp file + rename.
void write_file_atomic(const std::string& path, const std::string& contents);

// Raw item vectors (N x d) in the container with kind "vectors".
void save_vectors(const std::string& path, const EmbeddingMatrix<float>& vectors);
EmbeddingMatrix<float> load_vectors(const std::string& path);

// Catalog with kind "catalog"; `source_digest` records the tokenizer it came from.
std::uint64_t save_catalog(const std::string& path, const ItemCatalog& catalog,
                           std::uint64_t source_digest = 0);
ItemCatalog load_catalog(const std::string& path);

}  // namespace rpg
