#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rpg {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters or configuration values.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed or non-finite input data.
struct DataError : Error {
  using Error::Error;
};

/// Missing, unreadable or corrupt artifact file.
struct ArtifactError : Error {
  using Error::Error;
};

/// An artifact was built from inputs that no longer match.
struct StalenessError : Error {
  using Error::Error;
};

/// Caller broke a precondition.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------
// Dense type aliases
// ---------------------------------------------------------------------------

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXf = Matrix<float>;
using MatrixXd = Matrix<double>;
using VectorXf = Vector<float>;
using VectorXd = Vector<double>;

/// Row-major real table: raw item vectors, token tables and so on.
template <class Scalar>
using EmbeddingMatrix = RowMatrix<Scalar>;

using ItemId = std::uint32_t;
using Code = std::uint32_t;

// ---------------------------------------------------------------------------
// Semantic IDs
// ---------------------------------------------------------------------------

struct SemanticScheme {
  std::size_t m = 16;    // digits per item
  std::size_t M = 256;   // codes per digit
  std::size_t d = 64;    // embedding width

  std::size_t subspace_dim() const { return d / m; }
  std::size_t vocabulary_size() const { return m * M; }

  /// Throws ConfigError if the scheme is unusable.
  void validate() const;

  friend bool operator==(const SemanticScheme&, const SemanticScheme&) = default;
};

struct SemanticId {
  std::vector<Code> codes;

  std::size_t size() const { return codes.size(); }
  std::span<const Code> view() const { return codes; }
  friend bool operator==(const SemanticId&, const SemanticId&) = default;
};

/// Empty on success, otherwise a description of the first failing digit.
std::optional<std::string> validate_semantic_id(std::span<const Code> codes,
                                                const SemanticScheme& scheme);

/// Digit j, local code c -> j*M + c. Disjoint block per digit.
std::size_t token_global_index(std::size_t digit, Code code, const SemanticScheme& scheme);

/// Throws ContractViolation when `codes` is not a valid id under `scheme`.
void require_valid_id(std::span<const Code> codes, const SemanticScheme& scheme);

// ---------------------------------------------------------------------------
// Catalog and interactions
// ---------------------------------------------------------------------------

using CodeMatrix = Eigen::Matrix<Code, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense item id -> semantic id table. Row i holds the m codes of item i.
class ItemCatalog {
 public:
  ItemCatalog() = default;
  ItemCatalog(SemanticScheme scheme, CodeMatrix codes);

  const SemanticScheme& scheme() const { return scheme_; }
  std::size_t size() const { return static_cast<std::size_t>(codes_.rows()); }
  const CodeMatrix& codes() const { return codes_; }

  std::span<const Code> id(ItemId item) const {
    return {codes_.data() + static_cast<std::size_t>(item) * scheme_.m, scheme_.m};
  }
  SemanticId semantic_id(ItemId item) const {
    auto v = id(item);
    return SemanticId{{v.begin(), v.end()}};
  }

  /// 64-bit content hash over scheme and codes.
  std::uint64_t digest() const;

 private:
  SemanticScheme scheme_;
  CodeMatrix codes_;
};

struct InteractionDataset {
  std::size_t num_items = 0;
  std::vector<std::vector<ItemId>> sequences;

  /// Every id < num_items; sequences shorter than `min_length` are rejected.
  void validate(std::size_t min_length = 3) const;
  std::uint64_t digest() const;
};

/// Whitespace-separated item ids, one user per line, earliest first.
InteractionDataset read_dataset(const std::string& path, std::size_t num_items);
void write_dataset(const std::string& path, const InteractionDataset& dataset);
InteractionDataset parse_dataset(const std::string& text, std::size_t num_items);
std::string format_dataset(const InteractionDataset& dataset);

// ---------------------------------------------------------------------------
// Hashing helpers
// ---------------------------------------------------------------------------

/// FNV-1a 64 over raw bytes, chainable through `seed`.
std::uint64_t fnv1a(const void* data, std::size_t bytes,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string digest_hex(std::uint64_t digest);
std::uint64_t parse_digest_hex(const std::string& text);

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

}  // namespace rpg
