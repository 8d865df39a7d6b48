#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "metasched/errors.hpp"
#include "metasched/resources.hpp"

namespace metasched {

// Framing used on relay channels in service mode: 4-byte big-endian length
// prefix, then that many bytes of UTF-8 JSON.
inline std::string frame_encode(const std::string& body) {
  std::string out;
  out.reserve(body.size() + 4);
  std::uint32_t n = static_cast<std::uint32_t>(body.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += body;
  return out;
}

// Consumes one frame from the front of `buf`. Returns the body, or nullopt if
// the buffer does not yet hold a whole frame.
inline std::optional<std::string> frame_decode(std::string& buf) {
  if (buf.size() < 4) return std::nullopt;
  std::uint32_t n = (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[0])) << 24) |
                    (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[1])) << 16) |
                    (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[2])) << 8) |
                    static_cast<std::uint32_t>(static_cast<unsigned char>(buf[3]));
  if (buf.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
  std::string body = buf.substr(4, n);
  buf.erase(0, 4 + n);
  return body;
}

enum class MappingState { LIVE, EXPIRED };

struct NatMapping {
  std::string mapping_id;
  Endpoint agent_internal;
  Endpoint public_endpoint;
  double lease_expires_at = 0;
  MappingState state = MappingState::LIVE;
};

inline void to_json(nlohmann::json& j, const NatMapping& m) {
  j = nlohmann::json{{"mapping_id", m.mapping_id},
                     {"agent_internal", m.agent_internal},
                     {"public", m.public_endpoint},
                     {"lease_expires_at", m.lease_expires_at},
                     {"state", m.state == MappingState::LIVE ? "LIVE" : "EXPIRED"}};
}

// Contiguous range of gateway ports; lowest free port wins so tests are
// deterministic.
class PortPool {
 public:
  PortPool() = default;
  PortPool(std::string gateway_host, int range_start, int range_end)
      : gateway_host_(std::move(gateway_host)), range_start_(range_start), range_end_(range_end) {
    if (!Endpoint::valid_ipv4(gateway_host_)) fail(Err::InvalidArgument, "bad gateway host");
    if (range_start_ < 1 || range_end_ > 65535 || range_start_ > range_end_) {
      fail(Err::InvalidArgument, "bad port range");
    }
  }

  int allocate() {
    for (int p = range_start_; p <= range_end_; ++p) {
      if (!allocated_.count(p)) {
        allocated_.insert(p);
        return p;
      }
    }
    fail(Err::PoolExhausted, "no free port in [" + std::to_string(range_start_) + ", " +
                                 std::to_string(range_end_) + "]");
  }

  void release(int port) { allocated_.erase(port); }

  // Takes a specific port (restore path).
  void occupy(int port) {
    if (port < range_start_ || port > range_end_) fail(Err::InvalidArgument, "port outside pool");
    allocated_.insert(port);
  }

  const std::string& gateway_host() const { return gateway_host_; }
  int range_start() const { return range_start_; }
  int range_end() const { return range_end_; }
  std::size_t size() const { return static_cast<std::size_t>(range_end_ - range_start_ + 1); }
  std::size_t allocated_count() const { return allocated_.size(); }
  std::size_t free_count() const { return size() - allocated_.size(); }
  const std::set<int>& allocated() const { return allocated_; }

 private:
  std::string gateway_host_ = "0.0.0.0";
  int range_start_ = 1;
  int range_end_ = 1;
  std::set<int> allocated_;
};

// Delivery path from the gateway to one private agent. Private agents dial
// out and keep this channel open; all master->agent traffic rides on it.
struct RelayChannel {
  // Returns true when the message was delivered and acknowledged.
  std::function<bool(const std::string& message)> deliver;
};

// Maps private agents (which cannot open server-side sockets) to public
// (gateway_host, port) endpoints, with leases that expire unless renewed.
class NatGateway {
 public:
  NatGateway() = default;
  NatGateway(std::string gateway_host, int range_start, int range_end, double lease_ttl_s = 60.0)
      : pool_(std::move(gateway_host), range_start, range_end), lease_ttl_s_(lease_ttl_s) {}

  const NatMapping& register_private_agent(const Endpoint& agent_internal, double now) {
    for (const auto& [id, m] : mappings_) {
      if (m.state == MappingState::LIVE && m.agent_internal == agent_internal) {
        fail(Err::DuplicateInternalEndpoint, agent_internal.to_string());
      }
    }
    int port = pool_.allocate();
    NatMapping m;
    m.mapping_id = "map-" + std::to_string(++next_id_);
    m.agent_internal = agent_internal;
    m.public_endpoint = Endpoint::make(pool_.gateway_host(), port);
    m.lease_expires_at = now + lease_ttl_s_;
    m.state = MappingState::LIVE;
    auto [it, ok] = mappings_.emplace(m.mapping_id, std::move(m));
    (void)ok;
    return it->second;
  }

  // Inverse of registration: public endpoint -> internal endpoint of the LIVE
  // mapping. EXPIRED mappings resolve like unknown ones.
  const Endpoint& resolve(const Endpoint& public_endpoint) const {
    const NatMapping* m = find_live(public_endpoint);
    if (!m) fail(Err::MappingNotFound, public_endpoint.to_string());
    return m->agent_internal;
  }

  const NatMapping& renew(const std::string& mapping_id, double now) {
    auto it = mappings_.find(mapping_id);
    if (it == mappings_.end() || it->second.state != MappingState::LIVE) {
      fail(Err::MappingNotFound, mapping_id);
    }
    it->second.lease_expires_at = now + lease_ttl_s_;
    return it->second;
  }

  std::optional<std::string> mapping_id_for_internal(const Endpoint& internal) const {
    for (const auto& [id, m] : mappings_) {
      if (m.state == MappingState::LIVE && m.agent_internal == internal) return id;
    }
    return std::nullopt;
  }

  // Expires every LIVE mapping whose lease ended strictly before `now` and
  // returns their ids so the caller can mark the corresponding agents LOST.
  std::vector<std::string> sweep_expired(double now) {
    std::vector<std::string> expired;
    for (auto& [id, m] : mappings_) {
      if (m.state == MappingState::LIVE && m.lease_expires_at < now) {
        m.state = MappingState::EXPIRED;
        pool_.release(m.public_endpoint.port);
        channels_.erase(id);
        expired.push_back(id);
      }
    }
    return expired;
  }

  void attach_channel(const std::string& mapping_id, RelayChannel channel) {
    if (!mappings_.count(mapping_id)) fail(Err::MappingNotFound, mapping_id);
    channels_[mapping_id] = std::move(channel);
  }

  // Forwards `message` to the internal agent over its outbound channel.
  // At-most-once: a false ack or a missing channel raises ChannelDown and the
  // message is not retried here.
  void relay(const Endpoint& public_endpoint, const std::string& message) {
    const NatMapping* m = find_live(public_endpoint);
    if (!m) fail(Err::MappingNotFound, public_endpoint.to_string());
    auto ch = channels_.find(m->mapping_id);
    if (ch == channels_.end() || !ch->second.deliver) {
      fail(Err::ChannelDown, "no outbound channel for " + m->mapping_id);
    }
    if (!ch->second.deliver(message)) {
      fail(Err::ChannelDown, "delivery not acknowledged for " + m->mapping_id);
    }
  }

  bool has_channel(const Endpoint& public_endpoint) const {
    const NatMapping* m = find_live(public_endpoint);
    return m && channels_.count(m->mapping_id);
  }

  const std::map<std::string, NatMapping>& mappings() const { return mappings_; }
  const PortPool& pool() const { return pool_; }
  double lease_ttl_s() const { return lease_ttl_s_; }

  std::size_t live_count() const {
    std::size_t n = 0;
    for (const auto& [id, m] : mappings_) n += m.state == MappingState::LIVE;
    return n;
  }

  // Restore support: re-insert a mapping as LIVE and take its port. Expired
  // history is not carried across restarts.
  void restore_mapping(const NatMapping& m, std::uint64_t next_id) {
    mappings_[m.mapping_id] = m;
    if (m.state == MappingState::LIVE) pool_.occupy(m.public_endpoint.port);
    next_id_ = std::max(next_id_, next_id);
  }

  void restore_mapping_counter(std::uint64_t v) { next_id_ = std::max(next_id_, v); }

  // Expires one mapping by id (replay path; the live path uses sweep_expired).
  void expire_mapping(const std::string& mapping_id) {
    auto it = mappings_.find(mapping_id);
    if (it == mappings_.end()) fail(Err::MappingNotFound, mapping_id);
    if (it->second.state == MappingState::LIVE) {
      it->second.state = MappingState::EXPIRED;
      pool_.release(it->second.public_endpoint.port);
      channels_.erase(mapping_id);
    }
  }

  std::uint64_t next_id() const { return next_id_; }

 private:
  const NatMapping* find_live(const Endpoint& public_endpoint) const {
    for (const auto& [id, m] : mappings_) {
      if (m.state == MappingState::LIVE && m.public_endpoint == public_endpoint) return &m;
    }
    return nullptr;
  }

  PortPool pool_;
  double lease_ttl_s_ = 60.0;
  std::map<std::string, NatMapping> mappings_;
  std::map<std::string, RelayChannel> channels_;
  std::uint64_t next_id_ = 0;
};

}  // namespace metasched
