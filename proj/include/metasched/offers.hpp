#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metasched/errors.hpp"
#include "metasched/job.hpp"
#include "metasched/resources.hpp"

namespace metasched {

enum class Reachability { PUBLIC, PRIVATE_VIA_NAT };
enum class Liveness { ACTIVE, LOST };

inline std::string_view to_string(Reachability r) {
  return r == Reachability::PUBLIC ? "PUBLIC" : "PRIVATE_VIA_NAT";
}
inline std::string_view to_string(Liveness l) { return l == Liveness::ACTIVE ? "ACTIVE" : "LOST"; }

inline Reachability reachability_from_string(const std::string& s) {
  if (s == "PUBLIC") return Reachability::PUBLIC;
  if (s == "PRIVATE_VIA_NAT") return Reachability::PRIVATE_VIA_NAT;
  fail(Err::InvalidArgument, "unknown reachability: " + s);
}

// One compute node in the unified registry. For PRIVATE_VIA_NAT agents the
// endpoint is the NAT-issued public mapping, not the node's own address.
struct AgentRecord {
  std::string agent_id;
  std::string cluster_id;
  Endpoint endpoint;
  Reachability reachability = Reachability::PUBLIC;
  ResourceVector total;
  ResourceVector allocated;
  Liveness liveness = Liveness::ACTIVE;
  double last_heartbeat = 0;

  ResourceVector free() const { return rv_checked_sub(total, allocated); }
};

inline void to_json(nlohmann::json& j, const AgentRecord& a) {
  j = nlohmann::json{{"agent_id", a.agent_id},
                     {"cluster_id", a.cluster_id},
                     {"endpoint", a.endpoint},
                     {"reachability", std::string(to_string(a.reachability))},
                     {"total", a.total},
                     {"allocated", a.allocated},
                     {"liveness", std::string(to_string(a.liveness))}};
}

// Time-limited grant of one agent's whole free vector to one tenant.
struct Offer {
  std::string offer_id;
  std::string agent_id;
  std::string cluster_id;
  std::string tenant_id;
  ResourceVector resources;
  double issued_at = 0;
  double expires_at = 0;
};

inline void to_json(nlohmann::json& j, const Offer& o) {
  j = nlohmann::json{{"offer_id", o.offer_id},   {"agent_id", o.agent_id},
                     {"cluster_id", o.cluster_id}, {"tenant_id", o.tenant_id},
                     {"resources", o.resources},  {"issued_at", o.issued_at},
                     {"expires_at", o.expires_at}};
}

struct LaunchRequest {
  std::string job_id;
  ResourceVector request;
};

struct LaunchReceipt {
  std::string job_id;
  std::string agent_id;
  std::string cluster_id;
  std::string offer_id;
};

// The master's unified view: agent registry, free-resource tracking, and the
// offer protocol. All state is owned by the scheduler loop; nothing here is
// thread-safe on its own.
class OfferEngine {
 public:
  struct Config {
    double offer_ttl_s = 5.0;
    double liveness_timeout_s = 30.0;
  };

  OfferEngine() = default;
  explicit OfferEngine(Config cfg) : cfg_(cfg) {}

  const std::string& register_agent(const std::string& cluster_id, const Endpoint& endpoint,
                                    const ResourceVector& total, Reachability reachability,
                                    double now) {
    if (!(total.cpu_centi > 0 && total.mem_mb > 0 && total.disk_mb > 0)) {
      fail(Err::InvalidArgument, "agent total must be positive in every component");
    }
    for (const auto& [id, a] : agents_) {
      if (a.cluster_id == cluster_id && a.endpoint == endpoint) {
        fail(Err::AlreadyRegistered, cluster_id + "/" + endpoint.to_string());
      }
    }
    AgentRecord a;
    a.agent_id = "agent-" + pad(++next_agent_, 4);
    a.cluster_id = cluster_id;
    a.endpoint = endpoint;
    a.reachability = reachability;
    a.total = total;
    a.allocated = ResourceVector{};
    a.liveness = Liveness::ACTIVE;
    a.last_heartbeat = now;
    auto [it, ok] = agents_.emplace(a.agent_id, std::move(a));
    (void)ok;
    return it->first;
  }

  Liveness heartbeat(const std::string& agent_id, double now) {
    AgentRecord& a = agent(agent_id);
    a.last_heartbeat = now;
    if (a.liveness == Liveness::LOST) a.liveness = Liveness::ACTIVE;
    return a.liveness;
  }

  // Marks agents LOST whose heartbeat is older than the liveness timeout.
  // Returns the newly lost agent ids; the scheduler transitions their jobs.
  std::vector<std::string> sweep_liveness(double now) {
    std::vector<std::string> lost;
    for (auto& [id, a] : agents_) {
      if (a.liveness == Liveness::ACTIVE && now - a.last_heartbeat > cfg_.liveness_timeout_s) {
        a.liveness = Liveness::LOST;
        lost.push_back(id);
      }
    }
    return lost;
  }

  void mark_lost(const std::string& agent_id) { agent(agent_id).liveness = Liveness::LOST; }

  // Removes offers whose expiry passed. Acceptance at exactly expires_at still
  // succeeds, so only offers with expires_at < now are swept.
  std::vector<std::string> expire_offers(double now) {
    std::vector<std::string> expired;
    for (auto it = offers_.begin(); it != offers_.end();) {
      if (it->second.expires_at < now) {
        expired.push_back(it->first);
        it = offers_.erase(it);
      } else {
        ++it;
      }
    }
    return expired;
  }

  // Emits at most one offer per ACTIVE agent with free resources and no
  // outstanding offer. Each offer is addressed to the first tenant in
  // `tenant_order` that wants resources at that agent's cluster and is not
  // filtered on that agent.
  std::vector<Offer> generate_offers(
      const std::vector<std::string>& tenant_order,
      const std::function<bool(const std::string& tenant, const std::string& cluster)>& wants,
      double now) {
    std::vector<Offer> issued;
    for (auto& [agent_id, a] : agents_) {  // map order: deterministic by agent id
      if (a.liveness != Liveness::ACTIVE) continue;
      ResourceVector free = a.free();
      if (!free.any_positive()) continue;
      if (has_outstanding_offer(agent_id)) continue;
      for (const auto& tenant : tenant_order) {
        if (!wants(tenant, a.cluster_id)) continue;
        if (is_filtered(agent_id, tenant, now)) continue;
        Offer o;
        o.offer_id = "offer-" + pad(++next_offer_, 6);
        o.agent_id = agent_id;
        o.cluster_id = a.cluster_id;
        o.tenant_id = tenant;
        o.resources = free;
        o.issued_at = now;
        o.expires_at = now + cfg_.offer_ttl_s;
        offers_.emplace(o.offer_id, o);
        issued.push_back(o);
        break;
      }
    }
    return issued;
  }

  // Consumes the offer and launches the given QUEUED jobs on its agent.
  // Validation happens before any state changes; OverSubscription and friends
  // leave everything untouched.
  std::vector<LaunchReceipt> accept_offer(const std::string& offer_id,
                                          const std::vector<LaunchRequest>& launches,
                                          JobTable& jobs, double now) {
    auto it = offers_.find(offer_id);
    if (it == offers_.end()) fail(Err::OfferNotFound, offer_id);
    Offer offer = it->second;
    if (now > offer.expires_at) {
      offers_.erase(it);
      fail(Err::OfferExpired, offer_id);
    }

    ResourceVector sum;
    for (const auto& l : launches) {
      const JobRecord& job = jobs.get(l.job_id);
      if (job.state != JobState::QUEUED) fail(Err::JobNotQueued, l.job_id);
      if (job.spec.tenant_id != offer.tenant_id) {
        fail(Err::JobNotQueued, l.job_id + " not owned by " + offer.tenant_id);
      }
      if (!(l.request == job.spec.request)) {
        fail(Err::RequestMismatch, l.job_id);
      }
      sum = rv_add(sum, l.request);
    }
    if (!rv_fits(sum, offer.resources)) {
      fail(Err::OverSubscription, "requests exceed offer " + offer_id);
    }

    AgentRecord& a = agent(offer.agent_id);
    std::vector<LaunchReceipt> receipts;
    for (const auto& l : launches) {
      JobRecord& job = jobs.get(l.job_id);
      job = advance_job_state(job, JobEvent::launched, now, offer.agent_id, offer.cluster_id);
      a.allocated = rv_add(a.allocated, l.request);
      receipts.push_back(LaunchReceipt{l.job_id, offer.agent_id, offer.cluster_id, offer_id});
    }
    offers_.erase(offer_id);  // unused remainder is free again immediately
    return receipts;
  }

  // Consumes the offer; the tenant sees no offers from this agent while the
  // filter lasts. filter_duration_s == 0 means immediately re-offerable.
  void decline_offer(const std::string& offer_id, double filter_duration_s, double now) {
    auto it = offers_.find(offer_id);
    if (it == offers_.end()) fail(Err::OfferNotFound, offer_id);
    Offer offer = it->second;
    if (now > offer.expires_at) {
      offers_.erase(it);
      fail(Err::OfferExpired, offer_id);
    }
    offers_.erase(it);
    if (filter_duration_s > 0) {
      filters_[{offer.agent_id, offer.tenant_id}] = now + filter_duration_s;
    }
  }

  // Releases the job's resources and records the terminal state. Duration for
  // the usage ledger is actual (t_finish - t_start), never the estimate.
  JobRecord complete_task(const std::string& job_id, bool finished, JobTable& jobs, double now) {
    JobRecord& job = jobs.get(job_id);
    if (job.state != JobState::RUNNING) fail(Err::JobNotRunning, job_id);
    AgentRecord& a = agent(*job.agent_id);
    a.allocated = rv_checked_sub(a.allocated, job.spec.request);
    job = advance_job_state(job, finished ? JobEvent::finished : JobEvent::failed, now);
    return job;
  }

  // Returns the job's resources to the free pool when its agent vanished or a
  // launch could not be delivered.
  void release_allocation(const std::string& agent_id, const ResourceVector& request) {
    AgentRecord& a = agent(agent_id);
    a.allocated = rv_checked_sub(a.allocated, request);
  }

  bool has_outstanding_offer(const std::string& agent_id) const {
    for (const auto& [id, o] : offers_) {
      if (o.agent_id == agent_id) return true;
    }
    return false;
  }

  bool is_filtered(const std::string& agent_id, const std::string& tenant_id, double now) const {
    auto it = filters_.find({agent_id, tenant_id});
    return it != filters_.end() && now < it->second;
  }

  AgentRecord& agent(const std::string& agent_id) {
    auto it = agents_.find(agent_id);
    if (it == agents_.end()) fail(Err::UnknownAgent, agent_id);
    return it->second;
  }

  const AgentRecord& agent(const std::string& agent_id) const {
    auto it = agents_.find(agent_id);
    if (it == agents_.end()) fail(Err::UnknownAgent, agent_id);
    return it->second;
  }

  const std::map<std::string, AgentRecord>& agents() const { return agents_; }
  std::map<std::string, AgentRecord>& agents_mutable() { return agents_; }
  const std::map<std::string, Offer>& offers() const { return offers_; }
  const std::map<std::pair<std::string, std::string>, double>& filters() const { return filters_; }
  const Config& config() const { return cfg_; }

  // Restore support.
  void restore_agent(const AgentRecord& a, std::uint64_t next_agent) {
    agents_[a.agent_id] = a;
    next_agent_ = std::max(next_agent_, next_agent);
  }
  void restore_offer(const Offer& o, std::uint64_t next_offer) {
    offers_[o.offer_id] = o;
    next_offer_ = std::max(next_offer_, next_offer);
  }
  void restore_filter(const std::string& agent_id, const std::string& tenant_id, double until) {
    filters_[{agent_id, tenant_id}] = until;
  }
  void drop_offer(const std::string& offer_id) { offers_.erase(offer_id); }
  std::uint64_t next_agent_seq() const { return next_agent_; }
  std::uint64_t next_offer_seq() const { return next_offer_; }

  static std::string pad(std::uint64_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
  }

 private:
  Config cfg_;
  std::map<std::string, AgentRecord> agents_;
  std::map<std::string, Offer> offers_;
  std::map<std::pair<std::string, std::string>, double> filters_;
  std::uint64_t next_agent_ = 0;
  std::uint64_t next_offer_ = 0;
};

}  // namespace metasched
