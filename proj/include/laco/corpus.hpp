#pragma once

// Token corpora: JSON lines, one {"ids": [int, ...]} object per line. Any other
// field (e.g. "text") is ignored; blank lines are skipped.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "laco/error.hpp"

namespace laco {

using TokenSequence = std::vector<std::int32_t>;

struct Corpus {
  std::vector<TokenSequence> sentences;

  std::size_t size() const { return sentences.size(); }
  bool empty() const { return sentences.empty(); }
};

/// The calibration samples used while pruning.
using CalibrationSet = Corpus;

inline Corpus parse_corpus(std::istream& in, const std::string& origin = "<corpus>") {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TokenSequence ids = j.at("ids").get<TokenSequence>();
      if (ids.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty ids");
      c.sentences.push_back(std::move(ids));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  return parse_corpus(in, path.string());
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : c.sentences) out << nlohmann::json{{"ids", s}}.dump() << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

/// FNV-1a 64 over the raw bytes of a file, rendered as 16 hex digits.
inline std::string file_fnv1a64(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace laco
