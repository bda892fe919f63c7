#include "mhese/config.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#define TOML_ENABLE_FORMATTERS 0
#include <toml.hpp>

#include "mhese/errors.hpp"

namespace mhese {

namespace {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const toml::node* node, const std::string& field,
                         const std::string& msg) const {
    std::ostringstream os;
    os << source_;
    if (node && node->source().begin.line > 0) os << ":" << node->source().begin.line;
    os << ": " << field << ": " << msg;
    throw ConfigError(os.str());
  }

  double number(const toml::table& t, const std::string& key, const std::string& ctx,
                std::optional<double> fallback = std::nullopt) const {
    const toml::node* n = t.get(key);
    if (!n) {
      if (fallback) return *fallback;
      fail(&t, ctx + key, "missing required number");
    }
    if (auto v = n->value<double>()) return *v;
    fail(n, ctx + key, "expected a number");
  }

  int integer(const toml::table& t, const std::string& key, const std::string& ctx,
              std::optional<int> fallback = std::nullopt) const {
    const toml::node* n = t.get(key);
    if (!n) {
      if (fallback) return *fallback;
      fail(&t, ctx + key, "missing required integer");
    }
    if (auto v = n->value_exact<int64_t>()) return static_cast<int>(*v);
    fail(n, ctx + key, "expected an integer");
  }

  std::string text(const toml::table& t, const std::string& key, const std::string& ctx,
                   std::optional<std::string> fallback = std::nullopt) const {
    const toml::node* n = t.get(key);
    if (!n) {
      if (fallback) return *fallback;
      fail(&t, ctx + key, "missing required string");
    }
    if (auto v = n->value_exact<std::string>()) return *v;
    fail(n, ctx + key, "expected a string");
  }

  bool boolean(const toml::table& t, const std::string& key, const std::string& ctx,
               bool fallback) const {
    const toml::node* n = t.get(key);
    if (!n) return fallback;
    if (auto v = n->value_exact<bool>()) return *v;
    fail(n, ctx + key, "expected true or false");
  }

  const toml::table* table(const toml::table& t, const std::string& key,
                           const std::string& ctx) const {
    const toml::node* n = t.get(key);
    if (!n) return nullptr;
    if (const toml::table* tt = n->as_table()) return tt;
    fail(n, ctx + key, "expected a table");
  }

  std::vector<const toml::table*> tables(const toml::table& t, const std::string& key,
                                         const std::string& ctx) const {
    std::vector<const toml::table*> out;
    const toml::node* n = t.get(key);
    if (!n) return out;
    const toml::array* arr = n->as_array();
    if (!arr) fail(n, ctx + key, "expected an array of tables");
    for (const toml::node& e : *arr) {
      const toml::table* tt = e.as_table();
      if (!tt) fail(&e, ctx + key, "expected an array of tables");
      out.push_back(tt);
    }
    return out;
  }

  // Scalar applied to all nine states, or an array of nine.
  GenVector gen_vector(const toml::table& t, const std::string& key, const std::string& ctx,
                       const GenVector& fallback) const {
    const toml::node* n = t.get(key);
    if (!n) return fallback;
    if (auto v = n->value<double>()) return GenVector::Constant(*v);
    const toml::array* arr = n->as_array();
    if (!arr || arr->size() != kGenStates) {
      fail(n, ctx + key, "expected a number or an array of 9 numbers");
    }
    GenVector out;
    for (int i = 0; i < kGenStates; ++i) {
      auto v = (*arr)[i].value<double>();
      if (!v) fail(n, ctx + key, "expected numbers");
      out(i) = *v;
    }
    return out;
  }

  // Converts a 1-based node id to a 0-based index.
  int node(const toml::table& t, const std::string& key, const std::string& ctx,
           int n_nodes) const {
    const int id = integer(t, key, ctx);
    if (id < 1 || id > n_nodes) {
      fail(t.get(key), ctx + key,
           "node " + std::to_string(id) + " outside 1.." + std::to_string(n_nodes));
    }
    return id - 1;
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
};

toml::table parse_text(std::string_view text, const std::string& source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
       << e.description();
    throw ConfigError(os.str());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void read_generator_params(const Reader& rd, const toml::table& t, const std::string& ctx,
                           GeneratorParams& p) {
  const std::pair<const char*, double*> fields[] = {
      {"H", &p.H},         {"D", &p.D},           {"x_d", &p.x_d},       {"x_q", &p.x_q},
      {"x_d_t", &p.x_d_t}, {"x_q_t", &p.x_q_t},   {"T_d0_t", &p.T_d0_t}, {"T_q0_t", &p.T_q0_t},
      {"r_s", &p.r_s},     {"S_n", &p.S_n},       {"K_E", &p.K_E},       {"T_E", &p.T_E},
      {"K_F", &p.K_F},     {"T_F", &p.T_F},       {"K_A", &p.K_A},       {"T_A", &p.T_A},
      {"T_1", &p.T_1},     {"T_2", &p.T_2},       {"T_3", &p.T_3},       {"R", &p.R_droop},
      {"omega_n", &p.omega_n}};
  for (const auto& [key, dst] : fields) *dst = rd.number(t, key, ctx, *dst);
  try {
    p.validate();
  } catch (const InvalidParameters& e) {
    rd.fail(&t, ctx.substr(0, ctx.size() - 1), e.what());
  }
}

}  // namespace

std::string to_string(EstimatorChoice e) {
  switch (e) {
    case EstimatorChoice::Mhe:
      return "mhe";
    case EstimatorChoice::Sse:
      return "sse";
    case EstimatorChoice::Both:
      return "both";
  }
  return "both";
}

EstimatorChoice parse_estimator_choice(const std::string& s) {
  if (s == "mhe") return EstimatorChoice::Mhe;
  if (s == "sse") return EstimatorChoice::Sse;
  if (s == "both") return EstimatorChoice::Both;
  throw ConfigError("estimator must be one of mhe, sse, both (got '" + s + "')");
}

SystemDescription parse_system(std::string_view text, const std::string& source) {
  const Reader rd(source);
  const toml::table root = parse_text(text, source);
  SystemDescription sys;

  double s_b = 100.0;
  if (const toml::table* st = rd.table(root, "system", "")) {
    sys.name = rd.text(*st, "name", "system.", "system");
    s_b = rd.number(*st, "base_power", "system.", 100.0);
    sys.frequency = rd.number(*st, "frequency", "system.", 50.0);
    if (!(s_b > 0.0)) rd.fail(st->get("base_power"), "system.base_power", "must be positive");
    if (!(sys.frequency > 0.0)) rd.fail(st->get("frequency"), "system.frequency", "must be positive");
  }

  const auto buses = rd.tables(root, "bus", "");
  if (buses.empty()) rd.fail(&root, "bus", "at least one [[bus]] is required");
  const int n = static_cast<int>(buses.size());
  sys.schedule.resize(n);
  std::vector<bool> seen(n, false);
  std::vector<int> zero_nodes;
  bool have_slack = false;
  for (const toml::table* b : buses) {
    const int i = rd.node(*b, "id", "bus.", n);
    if (seen[i]) rd.fail(b, "bus.id", "duplicate bus " + std::to_string(i + 1));
    seen[i] = true;
    const std::string ctx = "bus[" + std::to_string(i + 1) + "].";
    const std::string type = rd.text(*b, "type", ctx, "pq");
    BusSchedule& s = sys.schedule[i];
    if (type == "slack") {
      s.type = BusType::Slack;
      have_slack = true;
    } else if (type == "pv") {
      s.type = BusType::PV;
    } else if (type == "pq") {
      s.type = BusType::PQ;
    } else if (type == "zero") {
      s.type = BusType::PQ;
      zero_nodes.push_back(i);
    } else {
      rd.fail(b->get("type"), ctx + "type", "expected slack, pv, pq or zero");
    }
    s.p = rd.number(*b, "p", ctx, 0.0);
    s.q = rd.number(*b, "q", ctx, 0.0);
    s.v = rd.number(*b, "v", ctx, 1.0);
    s.theta = rd.number(*b, "theta", ctx, 0.0);
    if (type == "zero" && (s.p != 0.0 || s.q != 0.0)) {
      rd.fail(b, ctx + "p", "zero-injection buses cannot schedule power");
    }
  }
  if (!have_slack) rd.fail(&root, "bus", "one bus must have type = \"slack\"");

  std::vector<Branch> branches;
  std::vector<Shunt> shunts(n);
  for (const toml::table* br : rd.tables(root, "branch", "")) {
    const int f = rd.node(*br, "from", "branch.", n);
    const int t = rd.node(*br, "to", "branch.", n);
    const std::string ctx = "branch[" + std::to_string(f + 1) + "-" + std::to_string(t + 1) + "].";
    const double r = rd.number(*br, "r", ctx, 0.0);
    const double x = rd.number(*br, "x", ctx);
    const double b_ch = rd.number(*br, "b", ctx, 0.0);
    const double z2 = r * r + x * x;
    if (!(z2 > 0.0)) rd.fail(br, ctx + "x", "series impedance must be nonzero");
    branches.push_back({f, t, r / z2, -x / z2});
    shunts[f].b += 0.5 * b_ch;
    shunts[t].b += 0.5 * b_ch;
  }

  std::vector<int> gen_nodes;
  for (const toml::table* g : rd.tables(root, "generator", "")) {
    Generator gen;
    gen.node = rd.node(*g, "bus", "generator.", n);
    const std::string ctx = "generator[" + std::to_string(gen.node + 1) + "].";
    if (sys.schedule[gen.node].type == BusType::PQ) {
      rd.fail(g, ctx + "bus", "generators must sit on slack or pv buses");
    }
    gen.params.omega_n = 2.0 * std::numbers::pi * sys.frequency;
    read_generator_params(rd, *g, ctx, gen.params);
    gen_nodes.push_back(gen.node);
    sys.generators.push_back(gen);
  }

  for (const toml::table* l : rd.tables(root, "load", "")) {
    LoadSpec ld;
    ld.node = rd.node(*l, "bus", "load.", n);
    const std::string ctx = "load[" + std::to_string(ld.node + 1) + "].";
    ld.p = rd.number(*l, "p", ctx, 0.0);
    ld.q = rd.number(*l, "q", ctx, 0.0);
    for (int z : zero_nodes) {
      if (z == ld.node) rd.fail(l, ctx + "bus", "loads cannot sit on zero-injection buses");
    }
    sys.schedule[ld.node].p -= ld.p;
    sys.schedule[ld.node].q -= ld.q;
    sys.loads.push_back(ld);
  }

  try {
    sys.network = NetworkModel(n, std::move(branches), std::move(shunts), gen_nodes,
                               zero_nodes, s_b);
  } catch (const Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return sys;
}

SystemDescription load_system(const std::filesystem::path& path) {
  return parse_system(read_file(path), path.string());
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& path) {
  const std::string source = path.string();
  const Reader rd(source);
  const toml::table root = parse_text(text, source);
  RunConfig cfg;
  cfg.config_path = path;

  const std::string sys_file = rd.text(root, "system", "");
  cfg.system_path = path.parent_path() / sys_file;
  cfg.system = load_system(cfg.system_path);
  const int n = cfg.system.network.size();

  if (const toml::table* sc = rd.table(root, "scenario", "")) {
    Scenario& s = cfg.scenario;
    s.duration = rd.number(*sc, "duration", "scenario.", s.duration);
    s.dt_sim = rd.number(*sc, "dt_sim", "scenario.", s.dt_sim);
    s.reporting_rate = rd.number(*sc, "reporting_rate", "scenario.", s.reporting_rate);
    const int seed = rd.integer(*sc, "seed", "scenario.", 1);
    if (seed < 0) rd.fail(sc->get("seed"), "scenario.seed", "must be nonnegative");
    s.noise_seed = static_cast<std::uint64_t>(seed);
    for (const toml::table* d : rd.tables(*sc, "disturbance", "scenario.")) {
      const std::string ctx = "scenario.disturbance.";
      const double time = rd.number(*d, "time", ctx);
      const std::string kind = rd.text(*d, "kind", ctx);
      if (kind == "load_step") {
        cfg.load_steps.push_back({time, rd.node(*d, "bus", ctx, n), rd.number(*d, "dp", ctx, 0.0),
                                  rd.number(*d, "dq", ctx, 0.0)});
      } else if (kind == "setpoint") {
        const int g = rd.integer(*d, "generator", ctx);
        if (g < 1 || g > static_cast<int>(cfg.system.generators.size())) {
          rd.fail(d->get("generator"), ctx + "generator", "unknown generator");
        }
        s.disturbances.push_back(
            {time, SetpointStep{g - 1, rd.number(*d, "dp_ref", ctx, 0.0),
                                rd.number(*d, "dv_ref", ctx, 0.0)}});
      } else {
        rd.fail(d->get("kind"), ctx + "kind", "expected load_step or setpoint");
      }
    }
    if (const toml::table* mm = rd.table(*sc, "mismatch", "scenario.")) {
      Mismatch m;
      m.x_d_t = rd.number(*mm, "x_d_t", "scenario.mismatch.", m.x_d_t);
      m.x_q_t = rd.number(*mm, "x_q_t", "scenario.mismatch.", m.x_q_t);
      m.H = rd.number(*mm, "H", "scenario.mismatch.", m.H);
      cfg.scenario.mismatch = m;
    }
  }
  try {
    cfg.scenario.validate();
  } catch (const InvalidParameters& e) {
    rd.fail(root.get("scenario"), "scenario", e.what());
  }
  for (const LoadStepSpec& ls : cfg.load_steps) {
    if (ls.time < 0.0 || ls.time > cfg.scenario.duration) {
      rd.fail(root.get("scenario"), "scenario.disturbance.time", "outside [0, duration]");
    }
  }

  for (const toml::table* p : rd.tables(root, "pmu", "")) {
    const std::string kind = rd.text(*p, "kind", "pmu.");
    const double var = rd.number(*p, "variance", "pmu.", 1e-6);
    if (!(var >= 0.0)) rd.fail(p->get("variance"), "pmu.variance", "must be nonnegative");
    MeasurementSpec spec;
    if (kind == "voltage") {
      spec = MeasurementSpec::voltage(rd.node(*p, "bus", "pmu.", n), var);
    } else if (kind == "injection") {
      spec = MeasurementSpec::injection(rd.node(*p, "bus", "pmu.", n), var);
    } else if (kind == "flow") {
      spec = MeasurementSpec::flow(rd.node(*p, "from", "pmu.", n), rd.node(*p, "to", "pmu.", n),
                                   var);
    } else {
      rd.fail(p->get("kind"), "pmu.kind", "expected voltage, flow or injection");
    }
    try {
      spec.validate(cfg.system.network);
    } catch (const Error& e) {
      rd.fail(p, "pmu", e.what());
    }
    cfg.pmus.push_back(spec);
  }
  if (cfg.pmus.empty()) rd.fail(&root, "pmu", "at least one [[pmu]] is required");

  cfg.mhe.dt = 1.0 / cfg.scenario.reporting_rate;
  if (const toml::table* es = rd.table(root, "estimator", "")) {
    const std::string ctx = "estimator.";
    try {
      cfg.estimator = parse_estimator_choice(rd.text(*es, "method", ctx, "both"));
    } catch (const ConfigError& e) {
      rd.fail(es->get("method"), ctx + "method", e.what());
    }
    MHEConfig& m = cfg.mhe;
    m.horizon = rd.integer(*es, "horizon", ctx, m.horizon);
    m.max_iter = rd.integer(*es, "max_iter", ctx, m.max_iter);
    m.tol = rd.number(*es, "tol", ctx, m.tol);
    m.arrival_weights = rd.gen_vector(*es, "arrival_weight", ctx, m.arrival_weights);
    if (es->get("process_weight")) {
      m.process_weights = rd.gen_vector(*es, "process_weight", ctx, m.process_weights);
    } else {
      m.process_weights = MHEConfig::process_weight_profile(
          rd.number(*es, "process_weight_fast", ctx, m.process_weights(0)),
          rd.number(*es, "process_weight_slow", ctx, m.process_weights(kGenStates - 1)));
    }
    m.coupling_weight = rd.number(*es, "coupling_weight", ctx, m.coupling_weight);
    if (es->get("measurement_weight")) {
      m.measurement_weight = rd.number(*es, "measurement_weight", ctx);
    }
    cfg.lnr = rd.boolean(*es, "lnr", ctx, false);
    cfg.lnr_threshold = rd.number(*es, "lnr_threshold", ctx, cfg.lnr_threshold);
    if (!(cfg.lnr_threshold > 0.0)) {
      rd.fail(es->get("lnr_threshold"), ctx + "lnr_threshold", "must be positive");
    }
    try {
      m.validate();
    } catch (const InvalidParameters& e) {
      rd.fail(es, "estimator", e.what());
    }
  }

  if (const toml::table* bd = rd.table(root, "bad_data", "")) {
    BadDataConfig b;
    b.channel = rd.text(*bd, "channel", "bad_data.");
    b.value = rd.number(*bd, "value", "bad_data.");
    b.t_start = rd.number(*bd, "t_start", "bad_data.", 0.0);
    try {
      scalar_channel_index(cfg.pmus, b.channel);
    } catch (const OutOfRange& e) {
      rd.fail(bd->get("channel"), "bad_data.channel", e.what());
    }
    cfg.bad_data = b;
  }

  std::string out = "out/" + path.stem().string();
  if (const toml::table* ot = rd.table(root, "output", "")) out = rd.text(*ot, "dir", "output.", out);
  cfg.output_dir = out;
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_file(path), path);
}

}  // namespace mhese
