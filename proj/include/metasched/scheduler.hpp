#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "metasched/backfill.hpp"
#include "metasched/errors.hpp"
#include "metasched/events.hpp"
#include "metasched/job.hpp"
#include "metasched/nat.hpp"
#include "metasched/offers.hpp"
#include "metasched/resources.hpp"
#include "metasched/usage.hpp"

namespace metasched {

// Tunable policy surface: fair-share weights, per-cluster submission limits,
// decay half-life, and backfill on/off. Everything else is engine plumbing
// with defaults.
struct PolicyConfig {
  double half_life_s = 86400.0;
  std::map<std::string, double> weights;        // tenant -> fair-share weight
  std::map<std::string, std::int64_t> limits;   // cluster -> max active per tenant
  bool backfill = true;

  double offer_ttl_s = 5.0;
  double liveness_timeout_s = 30.0;
  int requeue_max = 3;
  double decline_filter_s = 5.0;
  std::int64_t default_limit = 1000000;  // clusters without a configured limit
};

inline void to_json(nlohmann::json& j, const PolicyConfig& p) {
  j = nlohmann::json{{"half_life_s", p.half_life_s},
                     {"weights", p.weights},
                     {"limits", p.limits},
                     {"backfill", p.backfill ? "easy" : "off"}};
}

inline void from_json(const nlohmann::json& j, PolicyConfig& p) {
  p = PolicyConfig{};
  p.half_life_s = j.value("half_life_s", 86400.0);
  if (!(p.half_life_s > 0)) fail(Err::ConfigInvalid, "half_life_s must be positive");
  p.weights = j.value("weights", std::map<std::string, double>{});
  for (auto& [t, w] : p.weights) {
    if (!(w > 0)) fail(Err::ConfigInvalid, "weight for " + t + " must be positive");
  }
  p.limits = j.value("limits", std::map<std::string, std::int64_t>{});
  for (auto& [c, n] : p.limits) {
    if (n < 1) fail(Err::ConfigInvalid, "limit for " + c + " must be >= 1");
  }
  std::string bf = j.value("backfill", "easy");
  if (bf == "easy") {
    p.backfill = true;
  } else if (bf == "off") {
    p.backfill = false;
  } else {
    fail(Err::ConfigInvalid, "backfill must be \"easy\" or \"off\"");
  }
  p.offer_ttl_s = j.value("offer_ttl_s", 5.0);
  p.liveness_timeout_s = j.value("liveness_timeout_s", 30.0);
  p.requeue_max = j.value("requeue_max", 3);
  p.decline_filter_s = j.value("decline_filter_s", 5.0);
}

enum class RouteReason { AFFINITY, LEAST_PRESSURE, SPILLOVER };

inline std::string_view to_string(RouteReason r) {
  switch (r) {
    case RouteReason::AFFINITY: return "AFFINITY";
    case RouteReason::LEAST_PRESSURE: return "LEAST_PRESSURE";
    case RouteReason::SPILLOVER: return "SPILLOVER";
  }
  return "?";
}

struct ClusterVerdict {
  std::string cluster_id;
  std::string verdict;  // "Admit" | "Reject" | "NoCapacity"
  std::int64_t active_count = 0;
  std::int64_t limit = 0;
};

inline void to_json(nlohmann::json& j, const ClusterVerdict& v) {
  j = nlohmann::json{{"cluster_id", v.cluster_id}, {"verdict", v.verdict}};
  if (v.verdict == "Reject") {
    j["active_count"] = v.active_count;
    j["limit"] = v.limit;
  }
}

struct RoutingDecision {
  std::string job_id;
  std::string chosen_cluster;
  std::vector<ClusterVerdict> considered;
  RouteReason reason = RouteReason::LEAST_PRESSURE;
};

inline void to_json(nlohmann::json& j, const RoutingDecision& d) {
  j = nlohmann::json{{"job_id", d.job_id},
                     {"chosen_cluster", d.chosen_cluster},
                     {"considered", d.considered},
                     {"reason", std::string(to_string(d.reason))}};
}

// The front door: admission against per-cluster limits, cross-cluster
// routing, and the periodic tick that binds liveness, fair share, offers and
// backfill together. Owns all mutable state; single logical event loop.
//
// Every state change is appended to the event log and the log alone is
// replayed on restart, so mutations here come in pairs: the live operation
// and its mirror in apply_event().
class MetaScheduler {
 public:
  explicit MetaScheduler(PolicyConfig policy = {})
      : policy_(std::move(policy)),
        engine_(OfferEngine::Config{policy_.offer_ttl_s, policy_.liveness_timeout_s}),
        ledger_(policy_.half_life_s) {}

  // ---- bootstrap ---------------------------------------------------------

  void configure_nat(const std::string& gateway_host, int range_start, int range_end,
                     double lease_ttl_s = 60.0, double relay_latency_s = 0.0) {
    nat_ = NatGateway(gateway_host, range_start, range_end, lease_ttl_s);
    relay_latency_s_ = relay_latency_s;
  }

  void add_cluster(const std::string& cluster_id, const std::string& display_name, double now) {
    if (clusters_.count(cluster_id)) fail(Err::AlreadyRegistered, cluster_id);
    std::int64_t limit =
        policy_.limits.count(cluster_id) ? policy_.limits.at(cluster_id) : policy_.default_limit;
    emit_apply(now, "cluster_added",
               {{"cluster_id", cluster_id}, {"display_name", display_name}, {"limit", limit}});
  }

  // Registers a public agent.
  std::string add_public_agent(const std::string& cluster_id, const Endpoint& endpoint,
                               const ResourceVector& total, double now) {
    require_cluster(cluster_id);
    // Validate against live registry state before emitting.
    check_agent_registrable(cluster_id, endpoint, total);
    std::string agent_id = "agent-" + OfferEngine::pad(engine_.next_agent_seq() + 1, 4);
    nlohmann::json payload{{"agent_id", agent_id},         {"cluster_id", cluster_id},
                           {"endpoint", endpoint},         {"reachability", "PUBLIC"},
                           {"total", total}};
    emit_apply(now, "agent_registered", payload);
    return agent_id;
  }

  // Registers a private agent: the agent first obtains a NAT mapping (it can
  // only dial out), then joins the registry under the mapped public endpoint.
  std::string add_private_agent(const std::string& cluster_id, const Endpoint& internal,
                                const ResourceVector& total, double now) {
    require_cluster(cluster_id);
    if (!nat_) fail(Err::ConfigInvalid, "no NAT gateway configured; private agents cannot join");
    if (nat_->mapping_id_for_internal(internal)) {
      fail(Err::DuplicateInternalEndpoint, internal.to_string());
    }
    // Predict the mapping deterministically by performing it, then emitting.
    const NatMapping& m = nat_->register_private_agent(internal, now);
    std::string mapping_id = m.mapping_id;
    Endpoint public_ep = m.public_endpoint;
    nlohmann::json nat_payload{{"mapping_id", mapping_id},
                               {"agent_internal", internal},
                               {"public", public_ep},
                               {"lease_expires_at", m.lease_expires_at}};
    log_.append(now, "nat_registered", nat_payload);
    attach_managed_channel(mapping_id);

    check_agent_registrable(cluster_id, public_ep, total);
    std::string agent_id = "agent-" + OfferEngine::pad(engine_.next_agent_seq() + 1, 4);
    nlohmann::json payload{{"agent_id", agent_id},           {"cluster_id", cluster_id},
                           {"endpoint", public_ep},          {"reachability", "PRIVATE_VIA_NAT"},
                           {"total", total},                 {"mapping_id", mapping_id}};
    emit_apply(now, "agent_registered", payload);
    return agent_id;
  }

  // ---- job front door ----------------------------------------------------

  // Routes the job to the first admitting cluster (affinity first, then
  // ascending tenant pressure). When every cluster rejects on limits the job
  // is parked and retried each tick; only a request no cluster could ever fit
  // is an error.
  std::pair<std::string, std::optional<RoutingDecision>> submit_job(
      const JobSpec& spec, double now, std::optional<std::int64_t> actual_duration_s = {}) {
    spec.validate();
    if (clusters_.empty()) fail(Err::RequestUnsatisfiable, "no clusters configured");
    bool feasible = false;
    for (const auto& [cid, c] : clusters_) {
      if (cluster_can_ever_fit(cid, spec.request)) feasible = true;
    }
    if (!feasible) {
      fail(Err::RequestUnsatisfiable, "request exceeds every cluster's agent capacity");
    }

    std::string job_id = "job-" + OfferEngine::pad(next_job_ + 1, 6);
    nlohmann::json payload{{"job_id", job_id},
                           {"spec", spec},
                           {"duration_s", actual_duration_s.value_or(spec.est_duration_s)}};
    emit_apply(now, "job_submitted", payload);

    std::optional<RoutingDecision> decision = try_route(job_id, now);
    if (!decision) {
      emit_apply(now, "job_parked", {{"job_id", job_id}});
    }
    return {job_id, decision};
  }

  const JobRecord& job_status(const std::string& job_id) const { return jobs_.get(job_id); }

  JobRecord cancel_job(const std::string& job_id, double now) {
    const JobRecord& job = jobs_.get(job_id);
    if (job.state != JobState::SUBMITTED && job.state != JobState::QUEUED) {
      fail(Err::NotCancellable, job_id + " is " + std::string(to_string(job.state)));
    }
    emit_apply(now, "job_cancelled", {{"job_id", job_id}});
    return jobs_.get(job_id);
  }

  // ---- the scheduling tick -----------------------------------------------

  // One deterministic scheduling round. Order: liveness and lease sweeps,
  // completions due by now, fair-share ranking, offer generation, offer
  // serving (launch + backfill), overflow retry.
  nlohmann::json schedule_tick(double now) {
    nlohmann::json actions = nlohmann::json::array();
    last_tick_t_ = now;

    // (0) in-process agents heartbeat and renew their NAT leases implicitly.
    for (auto& [agent_id, a] : engine_mutable().agents_mutable()) {
      if (!unmanaged_.count(agent_id) && a.liveness == Liveness::ACTIVE) {
        a.last_heartbeat = now;
      }
    }
    if (nat_) {
      for (const auto& [mapping_id, m] : nat_->mappings()) {
        if (m.state == MappingState::LIVE && managed_mappings_.count(mapping_id)) {
          nat_->renew(mapping_id, now);
        }
      }
    }

    // (1) sweeps: stale offers, expired leases, dead agents.
    for (const auto& offer_id : engine_.expire_offers(now)) {
      log_.append(now, "offer_expired", {{"offer_id", offer_id}});
      actions.push_back({{"action", "offer_expired"}, {"offer_id", offer_id}});
    }
    if (nat_) {
      for (const auto& mapping_id : nat_->sweep_expired(now)) {
        log_.append(now, "nat_expired", {{"mapping_id", mapping_id}});
        const NatMapping& m = nat_->mappings().at(mapping_id);
        for (const auto& [agent_id, a] : engine_.agents()) {
          if (a.endpoint == m.public_endpoint && a.liveness == Liveness::ACTIVE) {
            mark_agent_lost(agent_id, now, actions);
          }
        }
      }
    }
    for (const auto& agent_id : engine_.sweep_liveness(now)) {
      log_.append(now, "agent_lost", {{"agent_id", agent_id}});
      handle_agent_loss(agent_id, now, actions);
    }

    // (1.5) completions due by now, in (due time, job id) order.
    reap_due_jobs(now, actions);

    // (2)(3) ledger decays on read; rank all known tenants.
    std::vector<std::string> rank = current_rank(now);

    // (4) one offer per free agent, addressed down the ranking.
    auto wants = [this](const std::string& tenant, const std::string& cluster) {
      auto qc = queues_.find(cluster);
      if (qc == queues_.end()) return false;
      auto qt = qc->second.find(tenant);
      return qt != qc->second.end() && !qt->second.empty();
    };
    std::vector<Offer> issued = engine_.generate_offers(rank, wants, now);
    for (const Offer& o : issued) {
      log_.append(now, "offer_issued",
                  {{"offer_id", o.offer_id},
                   {"agent_id", o.agent_id},
                   {"cluster_id", o.cluster_id},
                   {"tenant_id", o.tenant_id},
                   {"resources", o.resources},
                   {"issued_at", o.issued_at},
                   {"expires_at", o.expires_at}});
      actions.push_back({{"action", "offer_issued"},
                         {"offer_id", o.offer_id},
                         {"agent_id", o.agent_id},
                         {"tenant_id", o.tenant_id}});
    }

    // (5) serve every outstanding offer in offer id order.
    std::vector<std::string> offer_ids;
    for (const auto& [id, o] : engine_.offers()) offer_ids.push_back(id);
    for (const auto& id : offer_ids) {
      if (engine_.offers().count(id)) serve_offer(id, now, actions);
    }

    // (6) parked jobs get another shot at routing.
    std::vector<std::string> parked(overflow_.begin(), overflow_.end());
    for (const auto& job_id : parked) {
      if (jobs_.get(job_id).state != JobState::SUBMITTED) continue;
      std::optional<RoutingDecision> d = try_route(job_id, now);
      if (d) {
        actions.push_back({{"action", "unparked"},
                           {"job_id", job_id},
                           {"cluster_id", d->chosen_cluster}});
      }
    }
    return actions;
  }

  // ---- snapshots & replay --------------------------------------------------

  nlohmann::json snapshot_json() const {
    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& [cid, c] : clusters_) {
      clusters.push_back({{"cluster_id", cid},
                          {"display_name", c.display_name},
                          {"limit", c.limit},
                          {"agent_ids", std::vector<std::string>(c.agents.begin(), c.agents.end())}});
    }
    nlohmann::json agents = nlohmann::json::array();
    for (const auto& [aid, a] : engine_.agents()) {
      nlohmann::json ja = a;  // last_heartbeat is runtime liveness, not state
      ja["managed"] = unmanaged_.count(aid) == 0;
      agents.push_back(ja);
    }
    nlohmann::json offers = nlohmann::json::array();
    for (const auto& [oid, o] : engine_.offers()) offers.push_back(o);
    nlohmann::json filters = nlohmann::json::array();
    for (const auto& [key, until] : engine_.filters()) {
      filters.push_back({{"agent_id", key.first}, {"tenant_id", key.second}, {"until", until}});
    }
    nlohmann::json jobs = nlohmann::json::array();
    for (const auto& [jid, j] : jobs_.all()) {
      nlohmann::json jj = j;
      jj["duration_s"] = durations_.count(jid) ? durations_.at(jid) : j.spec.est_duration_s;
      jj["requeues"] = requeue_counts_.count(jid) ? requeue_counts_.at(jid) : 0;
      jobs.push_back(jj);
    }
    nlohmann::json queues = nlohmann::json::object();
    for (const auto& [cid, per_tenant] : queues_) {
      for (const auto& [tid, q] : per_tenant) {
        if (!q.empty()) queues[cid][tid] = std::vector<std::string>(q.begin(), q.end());
      }
    }
    nlohmann::json tenants = nlohmann::json::array();
    for (const auto& [tid, acct] : tenants_) tenants.push_back(acct);
    nlohmann::json usage = nlohmann::json::object();
    for (const auto& [tid, u] : ledger_.all()) usage[tid] = u;

    nlohmann::json nat = nullptr;
    if (nat_) {
      nlohmann::json mappings = nlohmann::json::array();
      for (const auto& [mid, m] : nat_->mappings()) {
        if (m.state != MappingState::LIVE) continue;  // expired history not carried
        mappings.push_back({{"mapping_id", mid},
                            {"agent_internal", m.agent_internal},
                            {"public", m.public_endpoint},
                            {"managed", managed_mappings_.count(mid) != 0}});
      }
      nat = nlohmann::json{{"gateway_host", nat_->pool().gateway_host()},
                           {"range_start", nat_->pool().range_start()},
                           {"range_end", nat_->pool().range_end()},
                           {"lease_ttl_s", nat_->lease_ttl_s()},
                           {"next_id", nat_->next_id()},
                           {"mappings", mappings}};
    }

    return nlohmann::json{
        {"format", 1},
        {"last_seq", log_.last_seq()},
        {"t", last_tick_t_},
        {"state",
         {{"clusters", clusters},
          {"agents", agents},
          {"offers", offers},
          {"filters", filters},
          {"jobs", jobs},
          {"queues", queues},
          {"overflow", std::vector<std::string>(overflow_.begin(), overflow_.end())},
          {"tenants", tenants},
          {"ledger",
           {{"half_life_s", ledger_.half_life_s()},
            {"last_decay_at", ledger_.last_decay_at()},
            {"usage", usage}}},
          {"nat", nat},
          {"counters",
           {{"next_job", next_job_},
            {"next_agent", engine_.next_agent_seq()},
            {"next_offer", engine_.next_offer_seq()}}}}}};
  }

  void restore_from_snapshot(const nlohmann::json& snap) {
    if (snap.value("format", 0) != 1) fail(Err::SnapshotCorrupt, "unknown snapshot format");
    const nlohmann::json& st = snap.at("state");
    last_tick_t_ = snap.value("t", 0.0);

    for (const auto& jc : st.at("clusters")) {
      ClusterInfo c;
      c.display_name = jc.at("display_name").get<std::string>();
      c.limit = jc.at("limit").get<std::int64_t>();
      for (const auto& a : jc.at("agent_ids")) c.agents.insert(a.get<std::string>());
      clusters_[jc.at("cluster_id").get<std::string>()] = c;
    }
    if (!st.at("nat").is_null()) {
      const auto& jn = st.at("nat");
      nat_ = NatGateway(jn.at("gateway_host").get<std::string>(), jn.at("range_start").get<int>(),
                        jn.at("range_end").get<int>(), jn.at("lease_ttl_s").get<double>());
      for (const auto& jm : jn.at("mappings")) {
        NatMapping m;
        m.mapping_id = jm.at("mapping_id").get<std::string>();
        m.agent_internal = jm.at("agent_internal").get<Endpoint>();
        m.public_endpoint = jm.at("public").get<Endpoint>();
        m.state = MappingState::LIVE;
        m.lease_expires_at = last_tick_t_ + nat_->lease_ttl_s();
        nat_->restore_mapping(m, numeric_suffix(m.mapping_id));
        if (jm.value("managed", true)) attach_managed_channel(m.mapping_id);
      }
      nat_->restore_mapping_counter(jn.value("next_id", std::uint64_t{0}));
    }
    for (const auto& ja : st.at("agents")) {
      AgentRecord a;
      a.agent_id = ja.at("agent_id").get<std::string>();
      a.cluster_id = ja.at("cluster_id").get<std::string>();
      a.endpoint = ja.at("endpoint").get<Endpoint>();
      a.reachability = reachability_from_string(ja.at("reachability").get<std::string>());
      a.total = ja.at("total").get<ResourceVector>();
      a.allocated = ja.at("allocated").get<ResourceVector>();
      a.liveness = ja.at("liveness").get<std::string>() == "ACTIVE" ? Liveness::ACTIVE : Liveness::LOST;
      a.last_heartbeat = last_tick_t_;
      engine_.restore_agent(a, numeric_suffix(a.agent_id));
      if (!ja.value("managed", true)) unmanaged_.insert(a.agent_id);
    }
    for (const auto& jo : st.at("offers")) {
      Offer o;
      o.offer_id = jo.at("offer_id").get<std::string>();
      o.agent_id = jo.at("agent_id").get<std::string>();
      o.cluster_id = jo.at("cluster_id").get<std::string>();
      o.tenant_id = jo.at("tenant_id").get<std::string>();
      o.resources = jo.at("resources").get<ResourceVector>();
      o.issued_at = jo.at("issued_at").get<double>();
      o.expires_at = jo.at("expires_at").get<double>();
      engine_.restore_offer(o, numeric_suffix(o.offer_id));
    }
    for (const auto& jf : st.at("filters")) {
      engine_.restore_filter(jf.at("agent_id").get<std::string>(),
                             jf.at("tenant_id").get<std::string>(), jf.at("until").get<double>());
    }
    for (const auto& jj : st.at("jobs")) {
      JobRecord r = jj.get<JobRecord>();
      durations_[r.job_id] = jj.value("duration_s", r.spec.est_duration_s);
      std::int64_t rq = jj.value("requeues", std::int64_t{0});
      if (rq > 0) requeue_counts_[r.job_id] = static_cast<int>(rq);
      next_job_ = std::max(next_job_, numeric_suffix(r.job_id));
      jobs_.put(std::move(r));
    }
    if (st.contains("queues")) {
      for (auto it = st.at("queues").begin(); it != st.at("queues").end(); ++it) {
        for (auto jt = it.value().begin(); jt != it.value().end(); ++jt) {
          std::deque<std::string>& q = queues_[it.key()][jt.key()];
          for (const auto& jid : jt.value()) q.push_back(jid.get<std::string>());
        }
      }
    }
    for (const auto& jid : st.at("overflow")) overflow_.push_back(jid.get<std::string>());
    for (const auto& jt : st.at("tenants")) {
      TenantAccount acct = jt.get<TenantAccount>();
      tenants_[acct.tenant_id] = acct;
    }
    std::map<std::string, UsageVector> usage;
    for (auto it = st.at("ledger").at("usage").begin(); it != st.at("ledger").at("usage").end();
         ++it) {
      usage[it.key()] = it.value().get<UsageVector>();
    }
    ledger_ = UsageLedger(st.at("ledger").at("half_life_s").get<double>());
    ledger_.restore(std::move(usage), st.at("ledger").at("last_decay_at").get<double>());
    next_job_ = std::max(next_job_, st.at("counters").value("next_job", std::uint64_t{0}));
    recompute_active_counts();
    log_.set_last_seq(snap.at("last_seq").get<std::uint64_t>());
  }

  // Applies one event to state. Used by replay; the live paths emit exactly
  // these kinds with exactly these payload fields.
  void apply_event(const Event& ev) {
    const nlohmann::json& p = ev.payload;
    if (ev.kind == "run_started") {
      // metadata only
    } else if (ev.kind == "cluster_added") {
      ClusterInfo c;
      c.display_name = p.at("display_name").get<std::string>();
      c.limit = p.at("limit").get<std::int64_t>();
      clusters_[p.at("cluster_id").get<std::string>()] = c;
    } else if (ev.kind == "nat_registered") {
      if (!nat_) fail(Err::LogCorrupt, "nat_registered without configured gateway");
      NatMapping m;
      m.mapping_id = p.at("mapping_id").get<std::string>();
      m.agent_internal = p.at("agent_internal").get<Endpoint>();
      m.public_endpoint = p.at("public").get<Endpoint>();
      m.lease_expires_at = p.at("lease_expires_at").get<double>();
      m.state = MappingState::LIVE;
      if (!nat_->mappings().count(m.mapping_id)) {
        nat_->restore_mapping(m, numeric_suffix(m.mapping_id));
      }
      attach_managed_channel(m.mapping_id);
    } else if (ev.kind == "nat_expired") {
      nat_->expire_mapping(p.at("mapping_id").get<std::string>());
    } else if (ev.kind == "agent_registered") {
      std::string agent_id = p.at("agent_id").get<std::string>();
      if (!agent_exists(agent_id)) {
        AgentRecord a;
        a.agent_id = agent_id;
        a.cluster_id = p.at("cluster_id").get<std::string>();
        a.endpoint = p.at("endpoint").get<Endpoint>();
        a.reachability = reachability_from_string(p.at("reachability").get<std::string>());
        a.total = p.at("total").get<ResourceVector>();
        a.liveness = Liveness::ACTIVE;
        a.last_heartbeat = ev.t;
        engine_.restore_agent(a, numeric_suffix(agent_id));
      }
      clusters_.at(p.at("cluster_id").get<std::string>()).agents.insert(agent_id);
      if (p.contains("mapping_id")) {
        agent_mapping_[agent_id] = p.at("mapping_id").get<std::string>();
      }
    } else if (ev.kind == "agent_lost") {
      engine_.mark_lost(p.at("agent_id").get<std::string>());
    } else if (ev.kind == "agent_reactivated") {
      engine_.heartbeat(p.at("agent_id").get<std::string>(), ev.t);
    } else if (ev.kind == "job_submitted") {
      JobRecord r;
      r.job_id = p.at("job_id").get<std::string>();
      r.spec = p.at("spec").get<JobSpec>();
      r.state = JobState::SUBMITTED;
      r.t_submit = ev.t;
      durations_[r.job_id] = p.at("duration_s").get<std::int64_t>();
      next_job_ = std::max(next_job_, numeric_suffix(r.job_id));
      ensure_tenant(r.spec.tenant_id);
      jobs_.put(std::move(r));
    } else if (ev.kind == "job_routed") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      std::string cluster = p.at("chosen_cluster").get<std::string>();
      r = advance_job_state(r, JobEvent::queued, ev.t);
      r.cluster_id = cluster;
      queues_[cluster][r.spec.tenant_id].push_back(r.job_id);
      active_counts_[{r.spec.tenant_id, cluster}]++;
      erase_from(overflow_, r.job_id);
    } else if (ev.kind == "job_parked") {
      overflow_.push_back(p.at("job_id").get<std::string>());
    } else if (ev.kind == "job_launched") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      std::string agent_id = p.at("agent_id").get<std::string>();
      std::string cluster = p.at("cluster_id").get<std::string>();
      remove_from_queue(cluster, r.spec.tenant_id, r.job_id);
      r = advance_job_state(r, JobEvent::launched, ev.t, agent_id, cluster);
      AgentRecord& a = engine_.agent(agent_id);
      a.allocated = rv_add(a.allocated, r.spec.request);
    } else if (ev.kind == "job_running") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      r = advance_job_state(r, JobEvent::running, ev.t);
    } else if (ev.kind == "job_finished" || ev.kind == "job_failed_running") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      engine_.release_allocation(*r.agent_id, r.spec.request);
      double started = r.t_start.value_or(ev.t);
      r = advance_job_state(r, ev.kind == "job_finished" ? JobEvent::finished : JobEvent::failed,
                            ev.t);
      active_counts_[{r.spec.tenant_id, *r.cluster_id}]--;
      ledger_.record_usage(r.spec.tenant_id, r.spec.request, ev.t - started, ev.t);
    } else if (ev.kind == "job_lost") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      engine_.release_allocation(*r.agent_id, r.spec.request);
      r = advance_job_state(r, JobEvent::lost, ev.t);
    } else if (ev.kind == "job_requeued") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      r = advance_job_state(r, JobEvent::requeued, ev.t);
      requeue_counts_[r.job_id]++;
      queues_[*r.cluster_id][r.spec.tenant_id].push_back(r.job_id);
    } else if (ev.kind == "job_failed_requeue_exhausted") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      // Terminal force-fail outside the lifecycle table: the requeue budget
      // is spent. No agent is associated; no usage is recorded.
      r.state = JobState::FAILED;
      r.t_finish = ev.t;
      active_counts_[{r.spec.tenant_id, *r.cluster_id}]--;
    } else if (ev.kind == "job_cancelled") {
      JobRecord& r = jobs_.get(p.at("job_id").get<std::string>());
      if (r.state == JobState::QUEUED) {
        remove_from_queue(*r.cluster_id, r.spec.tenant_id, r.job_id);
        active_counts_[{r.spec.tenant_id, *r.cluster_id}]--;
      } else {
        erase_from(overflow_, r.job_id);
      }
      r = advance_job_state(r, JobEvent::cancelled, ev.t);
    } else if (ev.kind == "offer_issued") {
      Offer o;
      o.offer_id = p.at("offer_id").get<std::string>();
      o.agent_id = p.at("agent_id").get<std::string>();
      o.cluster_id = p.at("cluster_id").get<std::string>();
      o.tenant_id = p.at("tenant_id").get<std::string>();
      o.resources = p.at("resources").get<ResourceVector>();
      o.issued_at = p.at("issued_at").get<double>();
      o.expires_at = p.at("expires_at").get<double>();
      engine_.restore_offer(o, numeric_suffix(o.offer_id));
    } else if (ev.kind == "offer_accepted" || ev.kind == "offer_expired") {
      engine_.drop_offer(p.at("offer_id").get<std::string>());
    } else if (ev.kind == "offer_declined") {
      engine_.drop_offer(p.at("offer_id").get<std::string>());
      double until = p.at("filter_until").get<double>();
      if (until > ev.t) {
        engine_.restore_filter(p.at("agent_id").get<std::string>(),
                               p.at("tenant_id").get<std::string>(), until);
      }
    } else {
      fail(Err::LogCorrupt, "unknown event kind: " + ev.kind);
    }
  }

  // Replays events (after any snapshot restore). Events must be in order.
  void replay(const std::vector<Event>& events) {
    for (const Event& ev : events) {
      if (ev.seq <= log_.last_seq()) continue;
      apply_event(ev);
      log_.set_last_seq(ev.seq);
      last_tick_t_ = std::max(last_tick_t_, ev.t);
    }
  }

  // ---- views ----------------------------------------------------------------

  nlohmann::json clusters_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [cid, c] : clusters_) {
      ResourceVector cap;
      for (const auto& aid : c.agents) cap = rv_add(cap, engine_.agent(aid).total);
      out.push_back({{"cluster_id", cid},
                     {"display_name", c.display_name},
                     {"max_active_per_tenant", c.limit},
                     {"agent_count", c.agents.size()},
                     {"total_capacity", cap}});
    }
    return out;
  }

  nlohmann::json agents_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [aid, a] : engine_.agents()) out.push_back(a);
    return out;
  }

  nlohmann::json offers_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [oid, o] : engine_.offers()) out.push_back(o);
    return out;
  }

  nlohmann::json jobs_json(const std::optional<std::string>& tenant = {}) const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [jid, j] : jobs_.all()) {
      if (tenant && j.spec.tenant_id != *tenant) continue;
      out.push_back(j);
    }
    return out;
  }

  const EventLog& log() const { return log_; }
  EventLog& log() { return log_; }
  const OfferEngine& engine() const { return engine_; }
  const JobTable& jobs() const { return jobs_; }
  const UsageLedger& ledger() const { return ledger_; }
  const PolicyConfig& policy() const { return policy_; }
  NatGateway* nat() { return nat_ ? &*nat_ : nullptr; }
  double last_tick_t() const { return last_tick_t_; }

  std::int64_t active_count(const std::string& tenant, const std::string& cluster) const {
    auto it = active_counts_.find({tenant, cluster});
    return it == active_counts_.end() ? 0 : it->second;
  }

  bool all_jobs_terminal() const {
    for (const auto& [jid, j] : jobs_.all()) {
      if (!is_terminal(j.state)) return false;
    }
    return true;
  }

  ResourceVector total_capacity() const {
    ResourceVector cap;
    for (const auto& [aid, a] : engine_.agents()) cap = rv_add(cap, a.total);
    return cap;
  }

  std::vector<std::string> current_rank(double now) const {
    std::vector<TenantAccount> accounts;
    for (const auto& [tid, acct] : tenants_) accounts.push_back(acct);
    return fair_share_rank(ledger_, accounts, total_capacity(), now);
  }

  // Test hook: agents excluded from the implicit per-tick heartbeat, so
  // liveness timeouts can actually fire.
  void set_unmanaged(const std::string& agent_id) { unmanaged_.insert(agent_id); }

 private:
  struct ClusterInfo {
    std::string display_name;
    std::int64_t limit = 1;
    std::set<std::string> agents;
  };

  // ---- helpers -------------------------------------------------------------

  void emit_apply(double t, const std::string& kind, nlohmann::json payload) {
    const Event& ev = log_.append(t, kind, std::move(payload));
    apply_event(ev);
  }

  void require_cluster(const std::string& cluster_id) const {
    if (!clusters_.count(cluster_id)) fail(Err::UnknownCluster, cluster_id);
  }

  bool agent_exists(const std::string& agent_id) const {
    return engine_.agents().count(agent_id) != 0;
  }

  void check_agent_registrable(const std::string& cluster_id, const Endpoint& endpoint,
                               const ResourceVector& total) const {
    if (!(total.cpu_centi > 0 && total.mem_mb > 0 && total.disk_mb > 0)) {
      fail(Err::InvalidArgument, "agent total must be positive in every component");
    }
    for (const auto& [id, a] : engine_.agents()) {
      if (a.cluster_id == cluster_id && a.endpoint == endpoint) {
        fail(Err::AlreadyRegistered, cluster_id + "/" + endpoint.to_string());
      }
    }
  }

  void ensure_tenant(const std::string& tenant_id) {
    if (!tenants_.count(tenant_id)) {
      double w = policy_.weights.count(tenant_id) ? policy_.weights.at(tenant_id) : 1.0;
      tenants_[tenant_id] = TenantAccount{tenant_id, w};
      ledger_.ensure_tenant(tenant_id);
    }
  }

  bool cluster_can_ever_fit(const std::string& cluster_id, const ResourceVector& request) const {
    const ClusterInfo& c = clusters_.at(cluster_id);
    for (const auto& aid : c.agents) {
      if (rv_fits(request, engine_.agent(aid).total)) return true;
    }
    return false;
  }

  std::int64_t cluster_limit(const std::string& cluster_id) const {
    return clusters_.at(cluster_id).limit;
  }

  // Evaluation order: affinity cluster first, then ascending tenant pressure
  // (active/limit, compared exactly), ties by cluster id.
  std::vector<std::string> routing_order(const JobSpec& spec) const {
    std::vector<std::string> rest;
    for (const auto& [cid, c] : clusters_) {
      if (spec.cluster_affinity && cid == *spec.cluster_affinity) continue;
      rest.push_back(cid);
    }
    const std::string& tenant = spec.tenant_id;
    std::sort(rest.begin(), rest.end(), [&](const std::string& x, const std::string& y) {
      std::int64_t ax = active_count(tenant, x), ay = active_count(tenant, y);
      std::int64_t lx = cluster_limit(x), ly = cluster_limit(y);
      // ax/lx < ay/ly without division
      if (ax * ly != ay * lx) return ax * ly < ay * lx;
      return x < y;
    });
    std::vector<std::string> order;
    if (spec.cluster_affinity && clusters_.count(*spec.cluster_affinity)) {
      order.push_back(*spec.cluster_affinity);
    }
    order.insert(order.end(), rest.begin(), rest.end());
    return order;
  }

  std::optional<RoutingDecision> try_route(const std::string& job_id, double now) {
    const JobRecord& job = jobs_.get(job_id);
    RoutingDecision d;
    d.job_id = job_id;
    for (const std::string& cid : routing_order(job.spec)) {
      ClusterVerdict v;
      v.cluster_id = cid;
      if (!cluster_can_ever_fit(cid, job.spec.request)) {
        v.verdict = "NoCapacity";
        d.considered.push_back(v);
        continue;
      }
      AdmitVerdict admit = check_submission(active_count(job.spec.tenant_id, cid),
                                            SubmissionLimit{cid, cluster_limit(cid)});
      if (admit.admitted) {
        v.verdict = "Admit";
        d.considered.push_back(v);
        d.chosen_cluster = cid;
        bool had_affinity = job.spec.cluster_affinity.has_value();
        if (had_affinity && cid == *job.spec.cluster_affinity) {
          d.reason = RouteReason::AFFINITY;
        } else if (had_affinity) {
          d.reason = RouteReason::SPILLOVER;
        } else {
          d.reason = RouteReason::LEAST_PRESSURE;
        }
        emit_apply(now, "job_routed",
                   {{"job_id", job_id},
                    {"chosen_cluster", cid},
                    {"reason", std::string(to_string(d.reason))},
                    {"considered", d.considered}});
        return d;
      }
      v.verdict = "Reject";
      v.active_count = admit.active_count;
      v.limit = admit.limit;
      d.considered.push_back(v);
    }
    return std::nullopt;
  }

  void mark_agent_lost(const std::string& agent_id, double now, nlohmann::json& actions) {
    engine_.mark_lost(agent_id);
    log_.append(now, "agent_lost", {{"agent_id", agent_id}});
    handle_agent_loss(agent_id, now, actions);
  }

  // Jobs on a lost agent go LOST, then either back into the queue or, once
  // the requeue budget is spent, FAILED.
  void handle_agent_loss(const std::string& agent_id, double now, nlohmann::json& actions) {
    std::vector<std::string> victims;
    for (const auto& [jid, j] : jobs_.all()) {
      if ((j.state == JobState::LAUNCHED || j.state == JobState::RUNNING) && j.agent_id &&
          *j.agent_id == agent_id) {
        victims.push_back(jid);
      }
    }
    for (const auto& jid : victims) lose_and_requeue(jid, now, actions);
    actions.push_back({{"action", "agent_lost"}, {"agent_id", agent_id}});
  }

  void lose_and_requeue(const std::string& job_id, double now, nlohmann::json& actions) {
    emit_apply(now, "job_lost", {{"job_id", job_id}});
    int requeues = requeue_counts_.count(job_id) ? requeue_counts_.at(job_id) : 0;
    if (requeues < policy_.requeue_max) {
      emit_apply(now, "job_requeued", {{"job_id", job_id}});
      actions.push_back({{"action", "requeued"}, {"job_id", job_id}});
    } else {
      emit_apply(now, "job_failed_requeue_exhausted", {{"job_id", job_id}});
      actions.push_back({{"action", "failed_requeue_exhausted"}, {"job_id", job_id}});
    }
  }

  void reap_due_jobs(double now, nlohmann::json& actions) {
    std::vector<std::pair<double, std::string>> due;
    for (const auto& [jid, j] : jobs_.all()) {
      if (j.state != JobState::RUNNING) continue;
      double end = *j.t_start + static_cast<double>(durations_.at(jid));
      if (end <= now) due.emplace_back(end, jid);
    }
    std::sort(due.begin(), due.end());
    for (const auto& [end, jid] : due) {
      emit_apply(now, "job_finished", {{"job_id", jid}});
      actions.push_back({{"action", "finished"}, {"job_id", jid}});
    }
  }

  // Builds the estimated-release timeline of one agent from live jobs.
  std::vector<RunningSlice> agent_slices(const std::string& agent_id, double now) const {
    std::vector<RunningSlice> slices;
    for (const auto& [jid, j] : jobs_.all()) {
      if ((j.state == JobState::RUNNING || j.state == JobState::LAUNCHED) && j.agent_id &&
          *j.agent_id == agent_id) {
        double started = j.t_start.value_or(now);
        double est_finish = std::max(now, started + static_cast<double>(j.spec.est_duration_s));
        slices.push_back(RunningSlice{j.spec.request, est_finish});
      }
    }
    return slices;
  }

  struct PlannedReservation {
    std::string agent_id;
    double start_at = 0;
  };

  // Earliest agent in the cluster that can ever hold the head request, given
  // current allocations and estimated completions. `offered_agent` free space
  // is overridden by what is left of the offer being served.
  std::optional<PlannedReservation> plan_reservation(
      const ResourceVector& head_request, const std::string& cluster_id,
      const std::string& offered_agent, const ResourceVector& offered_remaining,
      const std::vector<RunningSlice>& planned_on_offered, double now) const {
    std::optional<PlannedReservation> best;
    for (const auto& aid : clusters_.at(cluster_id).agents) {
      const AgentRecord& a = engine_.agent(aid);
      if (a.liveness != Liveness::ACTIVE) continue;
      ResourceVector free = aid == offered_agent ? offered_remaining : a.free();
      std::vector<RunningSlice> running = agent_slices(aid, now);
      if (aid == offered_agent) {
        running.insert(running.end(), planned_on_offered.begin(), planned_on_offered.end());
      }
      std::optional<double> t = earliest_fit_on_agent(head_request, a.total, free, running, now);
      if (!t) continue;
      if (!best || *t < best->start_at || (*t == best->start_at && aid < best->agent_id)) {
        best = PlannedReservation{aid, *t};
      }
    }
    return best;
  }

  // Serves one offer: launch the queue head (and successors) in order while
  // they fit; once blocked, plan the head's reservation and backfill behind
  // it. Anything launched is accepted atomically against the offer.
  void serve_offer(const std::string& offer_id, double now, nlohmann::json& actions) {
    Offer offer = engine_.offers().at(offer_id);
    auto qc = queues_.find(offer.cluster_id);
    std::deque<std::string> queue;  // working copy
    if (qc != queues_.end()) {
      auto qt = qc->second.find(offer.tenant_id);
      if (qt != qc->second.end()) queue = qt->second;
    }

    ResourceVector remaining = offer.resources;
    std::vector<LaunchRequest> planned;
    std::vector<RunningSlice> planned_slices;
    std::size_t i = 0;
    while (i < queue.size()) {
      const JobRecord& head = jobs_.get(queue[i]);
      if (rv_fits(head.spec.request, remaining)) {
        planned.push_back(LaunchRequest{head.job_id, head.spec.request});
        planned_slices.push_back(RunningSlice{
            head.spec.request, now + static_cast<double>(head.spec.est_duration_s)});
        remaining = rv_checked_sub(remaining, head.spec.request);
        ++i;
        continue;
      }
      if (!policy_.backfill) break;
      std::optional<PlannedReservation> res = plan_reservation(
          head.spec.request, offer.cluster_id, offer.agent_id, remaining, planned_slices, now);
      if (!res) break;  // nothing in the cluster can ever hold it right now
      Reservation reservation{offer.cluster_id, head.job_id, res->start_at, head.spec.request};
      // Only the reserved agent's spare capacity is safe for jobs that outlive
      // the reservation; elsewhere a backfill must finish before it starts.
      std::vector<QueuedJob> scan;
      scan.push_back(QueuedJob{head.job_id, head.spec.request, head.spec.est_duration_s});
      for (std::size_t k = i + 1; k < queue.size(); ++k) {
        const JobRecord& j = jobs_.get(queue[k]);
        scan.push_back(QueuedJob{j.job_id, j.spec.request, j.spec.est_duration_s});
      }
      ResourceVector shadow = offer.agent_id == res->agent_id
                                  ? rv_saturating_sub(remaining, head.spec.request)
                                  : ResourceVector{};
      std::vector<std::string> picks = backfill_select_with_shadow(scan, remaining, reservation,
                                                                   shadow, now);
      for (const auto& jid : picks) {
        const JobRecord& j = jobs_.get(jid);
        planned.push_back(LaunchRequest{jid, j.spec.request});
        planned_slices.push_back(
            RunningSlice{j.spec.request, now + static_cast<double>(j.spec.est_duration_s)});
        remaining = rv_checked_sub(remaining, j.spec.request);
        actions.push_back({{"action", "backfilled"}, {"job_id", jid}, {"agent_id", offer.agent_id}});
      }
      break;
    }

    if (planned.empty()) {
      // Hold the agent back from this tenant only when someone else is waiting.
      double filter = 0.0;
      for (const auto& [tid, q] : queues_[offer.cluster_id]) {
        if (tid != offer.tenant_id && !q.empty()) filter = policy_.decline_filter_s;
      }
      double filter_until = now + filter;
      engine_.decline_offer(offer_id, filter, now);
      log_.append(now, "offer_declined",
                  {{"offer_id", offer_id},
                   {"agent_id", offer.agent_id},
                   {"tenant_id", offer.tenant_id},
                   {"filter_until", filter_until}});
      actions.push_back({{"action", "offer_declined"}, {"offer_id", offer_id}});
      return;
    }

    engine_.accept_offer(offer_id, planned, jobs_, now);
    log_.append(now, "offer_accepted", {{"offer_id", offer_id}});
    for (const auto& l : planned) {
      remove_from_queue(offer.cluster_id, offer.tenant_id, l.job_id);
      log_.append(now, "job_launched",
                  {{"job_id", l.job_id},
                   {"agent_id", offer.agent_id},
                   {"cluster_id", offer.cluster_id},
                   {"offer_id", offer_id}});
      actions.push_back(
          {{"action", "launched"}, {"job_id", l.job_id}, {"agent_id", offer.agent_id}});
      deliver_launch(l.job_id, offer.agent_id, now, actions);
    }
  }

  // Public agents take launches directly; NAT agents get them relayed over
  // their outbound channel. A dead channel loses the job immediately.
  void deliver_launch(const std::string& job_id, const std::string& agent_id, double now,
                      nlohmann::json& actions) {
    const AgentRecord& a = engine_.agent(agent_id);
    if (a.reachability == Reachability::PRIVATE_VIA_NAT) {
      nlohmann::json msg{{"type", "launch"}, {"job_id", job_id}};
      try {
        nat_->relay(a.endpoint, frame_encode(msg.dump()));
      } catch (const Error&) {
        lose_and_requeue(job_id, now, actions);
        return;
      }
    }
    if (relay_latency_s_ > 0 && a.reachability == Reachability::PRIVATE_VIA_NAT) {
      pending_running_[job_id] = now + relay_latency_s_;
      return;
    }
    emit_apply(now, "job_running", {{"job_id", job_id}});
  }

  void recompute_active_counts() {
    active_counts_.clear();
    for (const auto& [jid, j] : jobs_.all()) {
      if (j.cluster_id && (j.state == JobState::QUEUED || j.state == JobState::LAUNCHED ||
                           j.state == JobState::RUNNING || j.state == JobState::LOST)) {
        active_counts_[{j.spec.tenant_id, *j.cluster_id}]++;
      }
    }
  }

  void remove_from_queue(const std::string& cluster, const std::string& tenant,
                         const std::string& job_id) {
    auto& q = queues_[cluster][tenant];
    for (auto it = q.begin(); it != q.end(); ++it) {
      if (*it == job_id) {
        q.erase(it);
        return;
      }
    }
  }

  static void erase_from(std::deque<std::string>& v, const std::string& s) {
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (*it == s) {
        v.erase(it);
        return;
      }
    }
  }

  static std::uint64_t numeric_suffix(const std::string& id) {
    auto dash = id.rfind('-');
    if (dash == std::string::npos) return 0;
    try {
      return std::stoull(id.substr(dash + 1));
    } catch (const std::exception&) {
      return 0;
    }
  }

  void attach_managed_channel(const std::string& mapping_id) {
    managed_mappings_.insert(mapping_id);
    // In-process agent model: acknowledge every relayed frame.
    nat_->attach_channel(mapping_id, RelayChannel{[](const std::string&) { return true; }});
  }

  // Engine internals the scheduler may touch directly (it owns the loop).
  class EngineAccess;
  OfferEngine& engine_mutable() { return engine_; }

  PolicyConfig policy_;
  OfferEngine engine_;
  std::optional<NatGateway> nat_;
  double relay_latency_s_ = 0.0;
  JobTable jobs_;
  UsageLedger ledger_;
  EventLog log_;

  std::map<std::string, ClusterInfo> clusters_;
  std::map<std::string, TenantAccount> tenants_;
  std::map<std::string, std::map<std::string, std::deque<std::string>>> queues_;  // cluster->tenant
  std::deque<std::string> overflow_;
  std::map<std::pair<std::string, std::string>, std::int64_t> active_counts_;  // (tenant, cluster)
  std::map<std::string, std::int64_t> durations_;  // job -> actual runtime (sim: true duration)
  std::map<std::string, int> requeue_counts_;
  std::map<std::string, std::string> agent_mapping_;   // agent -> NAT mapping
  std::map<std::string, double> pending_running_;      // job -> deliver_at (relay latency)
  std::set<std::string> unmanaged_;
  std::set<std::string> managed_mappings_;
  std::uint64_t next_job_ = 0;
  double last_tick_t_ = 0.0;
};

}  // namespace metasched
