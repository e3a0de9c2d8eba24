#include "rpg/container.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace rpg {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::size_t padded(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

std::uint64_t compute_digest(const std::string& kind, const SemanticScheme& scheme,
                             const nlohmann::json& meta, const unsigned char* payload,
                             std::size_t payload_bytes) {
  std::uint64_t h = fnv1a(kind.data(), kind.size());
  const std::uint64_t dims[3] = {scheme.m, scheme.M, scheme.d};
  h = fnv1a(dims, sizeof(dims), h);
  const std::string m = meta.dump();
  h = fnv1a(m.data(), m.size(), h);
  return fnv1a(payload, payload_bytes, h);
}

}  // namespace

ArtifactWriter::ArtifactWriter(std::string kind, SemanticScheme scheme)
    : kind_(std::move(kind)), scheme_(scheme) {}

void ArtifactWriter::add(const std::string& name, const char* dtype,
                         std::vector<std::size_t> shape, const void* data, std::size_t bytes,
                         std::size_t count) {
  if (product(shape) != count) {
    throw ContractViolation("artifact section '" + name + "': shape does not match value count");
  }
  Section s{name, dtype, std::move(shape), {}};
  s.data.resize(bytes);
  if (bytes) std::memcpy(s.data.data(), data, bytes);
  sections_.push_back(std::move(s));
}

void ArtifactWriter::add_f32(const std::string& name, std::vector<std::size_t> shape,
                             std::span<const float> values) {
  add(name, "f32", std::move(shape), values.data(), values.size_bytes(), values.size());
}

void ArtifactWriter::add_u32(const std::string& name, std::vector<std::size_t> shape,
                             std::span<const std::uint32_t> values) {
  add(name, "u32", std::move(shape), values.data(), values.size_bytes(), values.size());
}

std::uint64_t ArtifactWriter::digest() const {
  std::vector<unsigned char> payload;
  for (const auto& s : sections_) {
    payload.insert(payload.end(), s.data.begin(), s.data.end());
    payload.resize(padded(payload.size()), 0);
  }
  return compute_digest(kind_, scheme_, meta_, payload.data(), payload.size());
}

nlohmann::json ArtifactWriter::header() const {
  nlohmann::json sections = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& s : sections_) {
    sections.push_back({{"name", s.name},
                        {"dtype", s.dtype},
                        {"shape", s.shape},
                        {"offset", offset},
                        {"bytes", s.data.size()}});
    offset = padded(offset + s.data.size());
  }
  return {{"magic", kArtifactMagic},
          {"version", kArtifactVersion},
          {"kind", kind_},
          {"scheme", {{"m", scheme_.m}, {"M", scheme_.M}, {"d", scheme_.d}}},
          {"sections", sections},
          {"meta", meta_},
          {"digest", digest_hex(digest())}};
}

std::string ArtifactWriter::bytes() const {
  const std::string json = header().dump();
  std::string out;
  const std::uint64_t len = json.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += json;
  out.resize(padded(out.size()), '\0');
  for (const auto& s : sections_) {
    out.append(reinterpret_cast<const char*>(s.data.data()), s.data.size());
    out.resize(padded(out.size()), '\0');
  }
  return out;
}

std::uint64_t ArtifactWriter::write(const std::string& path) const {
  write_file_atomic(path, bytes());
  return digest();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  try {
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw ArtifactError("cannot write: " + tmp);
      out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
      if (!out) {
        out.close();
        fs::remove(tmp);
        throw ArtifactError("short write: " + tmp);
      }
    }
    fs::rename(tmp, target);
  } catch (const fs::filesystem_error& e) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw ArtifactError("cannot write " + path + ": " + e.what());
  }
}

Artifact Artifact::read(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("missing artifact: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), expected_kind, path);
}

Artifact Artifact::parse(const std::string& bytes, const std::string& expected_kind,
                         const std::string& origin) {
  Artifact a;
  a.origin_ = origin;
  auto corrupt = [&](const std::string& why) {
    return ArtifactError("corrupt artifact " + origin + ": " + why);
  };
  if (bytes.size() < sizeof(std::uint64_t)) throw corrupt("truncated");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (len > bytes.size() - sizeof(len)) throw corrupt("header length out of range");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + sizeof(len),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(sizeof(len) + len));
  } catch (const nlohmann::json::exception&) {
    throw corrupt("header is not JSON");
  }
  try {
    if (header.at("magic").get<std::string>() != kArtifactMagic) throw corrupt("bad magic");
    if (header.at("version").get<int>() != kArtifactVersion) throw corrupt("unsupported version");
    a.kind_ = header.at("kind").get<std::string>();
    const auto& s = header.at("scheme");
    a.scheme_ = {s.at("m").get<std::size_t>(), s.at("M").get<std::size_t>(),
                 s.at("d").get<std::size_t>()};
    a.meta_ = header.at("meta");
    a.digest_ = parse_digest_hex(header.at("digest").get<std::string>());
    for (const auto& sec : header.at("sections")) {
      Section entry{sec.at("dtype").get<std::string>(),
                    sec.at("shape").get<std::vector<std::size_t>>(),
                    sec.at("offset").get<std::size_t>(), sec.at("bytes").get<std::size_t>()};
      a.sections_.emplace(sec.at("name").get<std::string>(), std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("malformed header: ") + e.what());
  }
  if (a.kind_ != expected_kind) {
    throw ArtifactError(origin + ": expected a '" + expected_kind + "' artifact, found '" +
                        a.kind_ + "'");
  }

  a.payload_offset_ = padded(sizeof(len) + len);
  if (a.payload_offset_ > bytes.size()) throw corrupt("truncated payload");
  const std::size_t payload_bytes = bytes.size() - a.payload_offset_;
  for (const auto& [name, sec] : a.sections_) {
    const std::size_t elem = 4;
    if (sec.offset + sec.bytes > payload_bytes || sec.bytes != product(sec.shape) * elem) {
      throw corrupt("section '" + name + "' out of bounds");
    }
  }
  const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + a.payload_offset_;
  if (compute_digest(a.kind_, a.scheme_, a.meta_, payload, payload_bytes) != a.digest_) {
    throw corrupt("digest mismatch");
  }
  a.bytes_ = bytes;
  return a;
}

const std::vector<std::size_t>& Artifact::shape(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw ArtifactError(origin_ + ": no section '" + name + "'");
  return it->second.shape;
}

const Artifact::Section& Artifact::section(const std::string& name, const char* dtype) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw ArtifactError(origin_ + ": no section '" + name + "'");
  if (it->second.dtype != dtype) {
    throw ArtifactError(origin_ + ": section '" + name + "' is " + it->second.dtype);
  }
  return it->second;
}

std::vector<float> Artifact::f32(const std::string& name) const {
  const auto& s = section(name, "f32");
  std::vector<float> out(s.bytes / sizeof(float));
  if (s.bytes) std::memcpy(out.data(), bytes_.data() + payload_offset_ + s.offset, s.bytes);
  return out;
}

std::vector<std::uint32_t> Artifact::u32(const std::string& name) const {
  const auto& s = section(name, "u32");
  std::vector<std::uint32_t> out(s.bytes / sizeof(std::uint32_t));
  if (s.bytes) std::memcpy(out.data(), bytes_.data() + payload_offset_ + s.offset, s.bytes);
  return out;
}

std::uint64_t Artifact::meta_digest(const std::string& key) const {
  if (!meta_.contains(key)) throw ArtifactError(origin_ + ": meta has no '" + key + "'");
  return parse_digest_hex(meta_.at(key).get<std::string>());
}

void save_vectors(const std::string& path, const EmbeddingMatrix<float>& vectors) {
  SemanticScheme scheme{1, 2, static_cast<std::size_t>(vectors.cols())};
  ArtifactWriter w("vectors", scheme);
  w.add_f32("vectors",
            {static_cast<std::size_t>(vectors.rows()), static_cast<std::size_t>(vectors.cols())},
            {vectors.data(), static_cast<std::size_t>(vectors.size())});
  w.write(path);
}

EmbeddingMatrix<float> load_vectors(const std::string& path) {
  auto a = Artifact::read(path, "vectors");
  const auto& shape = a.shape("vectors");
  if (shape.size() != 2) throw ArtifactError(path + ": vectors must be 2-D");
  auto values = a.f32("vectors");
  EmbeddingMatrix<float> out(shape[0], shape[1]);
  std::copy(values.begin(), values.end(), out.data());
  if (!all_finite(out)) throw DataError(path + ": non-finite item vector");
  return out;
}

std::uint64_t save_catalog(const std::string& path, const ItemCatalog& catalog,
                           std::uint64_t source_digest) {
  ArtifactWriter w("catalog", catalog.scheme());
  w.meta()["content_digest"] = digest_hex(catalog.digest());
  w.meta()["source_digest"] = digest_hex(source_digest);
  w.add_u32("codes", {catalog.size(), catalog.scheme().m},
            {catalog.codes().data(), static_cast<std::size_t>(catalog.codes().size())});
  return w.write(path);
}

ItemCatalog load_catalog(const std::string& path) {
  auto a = Artifact::read(path, "catalog");
  const auto& shape = a.shape("codes");
  if (shape.size() != 2 || shape[1] != a.scheme().m) {
    throw ArtifactError(path + ": code table shape does not match scheme");
  }
  auto values = a.u32("codes");
  CodeMatrix codes(shape[0], shape[1]);
  std::copy(values.begin(), values.end(), codes.data());
  try {
    return ItemCatalog(a.scheme(), std::move(codes));
  } catch (const Error& e) {
    throw ArtifactError(path + ": " + e.what());
  }
}

}  // namespace rpg
