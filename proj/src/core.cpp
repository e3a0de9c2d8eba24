#include "rpg/core.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rpg {

void SemanticScheme::validate() const {
  if (m < 1) throw ConfigError("scheme: m must be >= 1");
  if (M < 2) throw ConfigError("scheme: M must be >= 2");
  if (d < 1) throw ConfigError("scheme: d must be >= 1");
  if (d % m != 0) {
    throw ConfigError("scheme: d=" + std::to_string(d) + " is not divisible by m=" +
                      std::to_string(m));
  }
}

std::optional<std::string> validate_semantic_id(std::span<const Code> codes,
                                                const SemanticScheme& scheme) {
  if (codes.size() != scheme.m) {
    return "length " + std::to_string(codes.size()) + " != " + std::to_string(scheme.m);
  }
  for (std::size_t j = 0; j < codes.size(); ++j) {
    if (codes[j] >= scheme.M) {
      return "digit " + std::to_string(j) + ": code " + std::to_string(codes[j]) +
             " out of range [0, " + std::to_string(scheme.M) + ")";
    }
  }
  return std::nullopt;
}

void require_valid_id(std::span<const Code> codes, const SemanticScheme& scheme) {
  if (auto violation = validate_semantic_id(codes, scheme)) {
    throw ContractViolation("invalid semantic id: " + *violation);
  }
}

std::size_t token_global_index(std::size_t digit, Code code, const SemanticScheme& scheme) {
  if (digit >= scheme.m || code >= scheme.M) {
    throw ContractViolation("token_global_index: (" + std::to_string(digit) + ", " +
                            std::to_string(code) + ") outside scheme");
  }
  return digit * scheme.M + code;
}

ItemCatalog::ItemCatalog(SemanticScheme scheme, CodeMatrix codes)
    : scheme_(scheme), codes_(std::move(codes)) {
  scheme_.validate();
  if (static_cast<std::size_t>(codes_.cols()) != scheme_.m && codes_.rows() > 0) {
    throw DataError("catalog: code table has " + std::to_string(codes_.cols()) +
                    " columns, scheme has m=" + std::to_string(scheme_.m));
  }
  if (codes_.rows() == 0) codes_.resize(0, static_cast<Eigen::Index>(scheme_.m));
  for (Eigen::Index i = 0; i < codes_.size(); ++i) {
    if (codes_.data()[i] >= scheme_.M) {
      throw DataError("catalog: item " + std::to_string(i / codes_.cols()) +
                      " has out-of-range code");
    }
  }
}

std::uint64_t ItemCatalog::digest() const {
  const std::uint64_t header[3] = {scheme_.m, scheme_.M, scheme_.d};
  std::uint64_t h = fnv1a(header, sizeof(header));
  return fnv1a(codes_.data(), sizeof(Code) * static_cast<std::size_t>(codes_.size()), h);
}

void InteractionDataset::validate(std::size_t min_length) const {
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    const auto& seq = sequences[u];
    if (seq.size() < min_length) {
      throw DataError("dataset: user " + std::to_string(u) + " has " +
                      std::to_string(seq.size()) + " interactions, need " +
                      std::to_string(min_length));
    }
    for (ItemId item : seq) {
      if (item >= num_items) {
        throw DataError("dataset: user " + std::to_string(u) + " references item " +
                        std::to_string(item) + " >= N=" + std::to_string(num_items));
      }
    }
  }
}

std::uint64_t InteractionDataset::digest() const {
  std::uint64_t n = num_items;
  std::uint64_t h = fnv1a(&n, sizeof(n));
  for (const auto& seq : sequences) {
    std::uint64_t len = seq.size();
    h = fnv1a(&len, sizeof(len), h);
    h = fnv1a(seq.data(), seq.size() * sizeof(ItemId), h);
  }
  return h;
}

InteractionDataset parse_dataset(const std::string& text, std::size_t num_items) {
  InteractionDataset out;
  out.num_items = num_items;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    std::vector<ItemId> seq;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      ItemId value = 0;
      auto [next, ec] = std::from_chars(p, end, value);
      if (ec != std::errc{} || (next < end && *next != ' ' && *next != '\t' && *next != '\r')) {
        throw DataError("dataset line " + std::to_string(lineno) + ": bad item id");
      }
      if (value >= num_items) {
        throw DataError("dataset line " + std::to_string(lineno) + ": item " +
                        std::to_string(value) + " >= N=" + std::to_string(num_items));
      }
      seq.push_back(value);
      p = next;
    }
    if (!seq.empty()) out.sequences.push_back(std::move(seq));
  }
  return out;
}

std::string format_dataset(const InteractionDataset& dataset) {
  std::string out;
  for (const auto& seq : dataset.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out.push_back(' ');
      out += std::to_string(seq[i]);
    }
    out.push_back('\n');
  }
  return out;
}

InteractionDataset read_dataset(const std::string& path, std::size_t num_items) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open dataset: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str(), num_items);
}

void write_dataset(const std::string& path, const InteractionDataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write dataset: " + path);
  out << format_dataset(dataset);
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

std::uint64_t parse_digest_hex(const std::string& text) {
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, 16);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ArtifactError("bad digest: " + text);
  }
  return value;
}

}  // namespace rpg
