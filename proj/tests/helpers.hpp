#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "rpg/core.hpp"
#include "rpg/model.hpp"

namespace rpg::test {

inline CodeMatrix random_codes(const SemanticScheme& scheme, std::size_t n, std::mt19937_64& rng) {
  CodeMatrix codes(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(scheme.m));
  std::uniform_int_distribution<Code> code(0, static_cast<Code>(scheme.M - 1));
  for (Eigen::Index i = 0; i < codes.size(); ++i) codes.data()[i] = code(rng);
  return codes;
}

inline ItemCatalog random_catalog(const SemanticScheme& scheme, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ItemCatalog(scheme, random_codes(scheme, n, rng));
}

inline ModelShape small_shape(std::size_t m = 2, std::size_t M = 4, std::size_t d = 8,
                              std::size_t h = 16) {
  ModelShape s;
  s.scheme = {m, M, d};
  s.hidden = h;
  return s;
}

inline std::vector<ItemId> random_history(std::size_t n_items, std::size_t len,
                                          std::mt19937_64& rng) {
  std::uniform_int_distribution<ItemId> pick(0, static_cast<ItemId>(n_items - 1));
  std::vector<ItemId> out(len);
  for (auto& v : out) v = pick(rng);
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rpg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Runs a shell command and returns its exit status.
inline int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace rpg::test
