#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metasched/errors.hpp"

namespace metasched {

// 64-bit FNV-1a; used for trace hashes. Stable across platforms.
inline std::uint64_t fnv1a64(const std::string& data, std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// CRC-32 (IEEE 802.3, reflected); used to seal snapshots.
inline std::uint32_t crc32(const std::string& data) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xffffffffu;
  for (unsigned char b : data) crc = table[(crc ^ b) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

inline std::string hex32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(8, '0');
  for (int i = 7; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// One state change. The ordered sequence of these is the source of truth:
// replaying them rebuilds scheduler state, and all metrics and audits are
// computed from them alone.
struct Event {
  std::uint64_t seq = 0;
  double t = 0;
  std::string kind;
  nlohmann::json payload;

  std::string to_line() const {
    nlohmann::json j{{"seq", seq}, {"t", t}, {"kind", kind}, {"payload", payload}};
    return j.dump();
  }

  static Event from_line(const std::string& line) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail(Err::LogCorrupt, "unparseable event record");
    }
    if (!j.is_object() || !j.contains("seq") || !j.contains("t") || !j.contains("kind") ||
        !j.contains("payload")) {
      fail(Err::LogCorrupt, "event record missing fields");
    }
    Event e;
    e.seq = j.at("seq").get<std::uint64_t>();
    e.t = j.at("t").get<double>();
    e.kind = j.at("kind").get<std::string>();
    e.payload = j.at("payload");
    return e;
  }
};

// Append-only event stream, kept in memory and optionally mirrored to a
// JSON-lines file. Single writer by construction (the scheduler loop).
class EventLog {
 public:
  EventLog() = default;

  // Opens (appending) a JSONL file mirror. Throws on unwritable paths.
  void open_file(const std::string& path) {
    file_path_ = path;
    file_.open(path, std::ios::app);
    if (!file_) fail(Err::InvalidArgument, "cannot open event log at " + path);
  }

  const Event& append(double t, std::string kind, nlohmann::json payload) {
    Event e;
    e.seq = ++last_seq_;
    e.t = t;
    e.kind = std::move(kind);
    e.payload = std::move(payload);
    events_.push_back(std::move(e));
    const Event& ref = events_.back();
    if (file_.is_open()) {
      file_ << ref.to_line() << '\n';
      file_.flush();
    }
    return ref;
  }

  const std::vector<Event>& events() const { return events_; }
  std::uint64_t last_seq() const { return last_seq_; }
  void set_last_seq(std::uint64_t seq) { last_seq_ = seq; }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : events_) {
      out += e.to_line();
      out += '\n';
    }
    return out;
  }

  std::string trace_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : events_) h = fnv1a64(e.to_line() + "\n", h);
    return hex64(h);
  }

  // Parses a JSONL trace. On malformed input reports the 1-based line number.
  static std::vector<Event> parse_jsonl(const std::string& text) {
    std::vector<Event> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() : nl + 1;
      ++line_no;
      if (line.empty()) continue;
      try {
        out.push_back(Event::from_line(line));
      } catch (const Error&) {
        fail(Err::LogCorrupt, "malformed record at line " + std::to_string(line_no));
      }
    }
    return out;
  }

  static std::vector<Event> read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) return {};
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_jsonl(text);
  }

 private:
  std::vector<Event> events_;
  std::uint64_t last_seq_ = 0;
  std::string file_path_;
  std::ofstream file_;
};

}  // namespace metasched
