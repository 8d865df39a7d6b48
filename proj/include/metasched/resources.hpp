#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include <json.hpp>

#include "metasched/errors.hpp"

namespace metasched {

// Quantity of cpus, memory and disk on one node or in one request.
//
// cpus are held in hundredths of a core so that allocation bookkeeping is
// exact: add followed by checked_sub round-trips bitwise, which the
// conservation audits rely on. mem/disk are whole MiB.
struct ResourceVector {
  std::int64_t cpu_centi = 0;
  std::int64_t mem_mb = 0;
  std::int64_t disk_mb = 0;

  static ResourceVector make(double cpus, std::int64_t mem_mb, std::int64_t disk_mb) {
    if (!std::isfinite(cpus) || cpus < 0.0 || mem_mb < 0 || disk_mb < 0) {
      fail(Err::InvalidArgument, "resource components must be finite and non-negative");
    }
    ResourceVector rv;
    rv.cpu_centi = static_cast<std::int64_t>(std::llround(cpus * 100.0));
    rv.mem_mb = mem_mb;
    rv.disk_mb = disk_mb;
    return rv;
  }

  double cpus() const { return static_cast<double>(cpu_centi) / 100.0; }

  bool is_zero() const { return cpu_centi == 0 && mem_mb == 0 && disk_mb == 0; }
  bool any_positive() const { return cpu_centi > 0 || mem_mb > 0 || disk_mb > 0; }
  bool all_positive() const { return cpu_centi > 0 && mem_mb > 0 && disk_mb > 0; }

  friend bool operator==(const ResourceVector&, const ResourceVector&) = default;

  std::string to_string() const {
    return "{cpus=" + std::to_string(cpus()) + ", mem_mb=" + std::to_string(mem_mb) +
           ", disk_mb=" + std::to_string(disk_mb) + "}";
  }
};

namespace detail {
inline std::int64_t checked_add_i64(std::int64_t a, std::int64_t b) {
  std::int64_t out = 0;
  if (__builtin_add_overflow(a, b, &out)) {
    fail(Err::ArithmeticOverflow, "resource component overflow");
  }
  return out;
}
}  // namespace detail

inline ResourceVector rv_add(const ResourceVector& a, const ResourceVector& b) {
  ResourceVector out;
  out.cpu_centi = detail::checked_add_i64(a.cpu_centi, b.cpu_centi);
  out.mem_mb = detail::checked_add_i64(a.mem_mb, b.mem_mb);
  out.disk_mb = detail::checked_add_i64(a.disk_mb, b.disk_mb);
  return out;
}

// Componentwise a - b; raises InsufficientResources as soon as any component
// would go negative, signalling an over-allocation attempt.
inline ResourceVector rv_checked_sub(const ResourceVector& a, const ResourceVector& b) {
  if (b.cpu_centi > a.cpu_centi || b.mem_mb > a.mem_mb || b.disk_mb > a.disk_mb) {
    fail(Err::InsufficientResources, a.to_string() + " - " + b.to_string());
  }
  ResourceVector out;
  out.cpu_centi = a.cpu_centi - b.cpu_centi;
  out.mem_mb = a.mem_mb - b.mem_mb;
  out.disk_mb = a.disk_mb - b.disk_mb;
  return out;
}

inline bool rv_fits(const ResourceVector& request, const ResourceVector& available) {
  return request.cpu_centi <= available.cpu_centi && request.mem_mb <= available.mem_mb &&
         request.disk_mb <= available.disk_mb;
}

// max(0, a - b) componentwise; used for shadow capacity where clamping,
// not failing, is the point.
inline ResourceVector rv_saturating_sub(const ResourceVector& a, const ResourceVector& b) {
  ResourceVector out;
  out.cpu_centi = a.cpu_centi > b.cpu_centi ? a.cpu_centi - b.cpu_centi : 0;
  out.mem_mb = a.mem_mb > b.mem_mb ? a.mem_mb - b.mem_mb : 0;
  out.disk_mb = a.disk_mb > b.disk_mb ? a.disk_mb - b.disk_mb : 0;
  return out;
}

inline void to_json(nlohmann::json& j, const ResourceVector& rv) {
  j = nlohmann::json{{"cpus", rv.cpus()}, {"mem_mb", rv.mem_mb}, {"disk_mb", rv.disk_mb}};
}

inline void from_json(const nlohmann::json& j, ResourceVector& rv) {
  rv = ResourceVector::make(j.at("cpus").get<double>(), j.at("mem_mb").get<std::int64_t>(),
                            j.at("disk_mb").get<std::int64_t>());
}

// host:port pair. host must be a dotted-quad IPv4 literal.
struct Endpoint {
  std::string host;
  int port = 0;

  static bool valid_ipv4(const std::string& s) {
    int dots = 0;
    std::size_t i = 0;
    for (int part = 0; part < 4; ++part) {
      if (i >= s.size()) return false;
      std::size_t start = i;
      long v = 0;
      while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
        v = v * 10 + (s[i] - '0');
        if (v > 255) return false;
        ++i;
      }
      if (i == start || i - start > 3) return false;
      if (part < 3) {
        if (i >= s.size() || s[i] != '.') return false;
        ++i;
        ++dots;
      }
    }
    return i == s.size() && dots == 3;
  }

  static Endpoint make(std::string host, int port) {
    if (!valid_ipv4(host)) fail(Err::InvalidArgument, "not a dotted-quad IPv4 host: " + host);
    if (port < 1 || port > 65535) {
      fail(Err::InvalidArgument, "port out of range: " + std::to_string(port));
    }
    return Endpoint{std::move(host), port};
  }

  // Parses "a.b.c.d:port".
  static Endpoint parse(const std::string& s) {
    auto colon = s.rfind(':');
    if (colon == std::string::npos) fail(Err::InvalidArgument, "endpoint missing port: " + s);
    int port = 0;
    try {
      port = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
      fail(Err::InvalidArgument, "bad endpoint port: " + s);
    }
    return make(s.substr(0, colon), port);
  }

  std::string to_string() const { return host + ":" + std::to_string(port); }

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
  friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

inline void to_json(nlohmann::json& j, const Endpoint& e) {
  j = nlohmann::json{{"host", e.host}, {"port", e.port}};
}

inline void from_json(const nlohmann::json& j, Endpoint& e) {
  e = Endpoint::make(j.at("host").get<std::string>(), j.at("port").get<int>());
}

}  // namespace metasched
