#include "mhese/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mhese/errors.hpp"

namespace mhese {

namespace {

// A current that is a linear combination sum_k y_k V_k of nodal voltages.
struct VoltageTerm {
  int node;
  double g;
  double b;
};

std::vector<VoltageTerm> injection_terms(const NetworkModel& net, int i) {
  std::vector<VoltageTerm> terms;
  const Shunt& sh = net.shunts()[i];
  double g_self = sh.g;
  double b_self = sh.b;
  for (const Neighbor& nb : net.neighbors(i)) {
    g_self += nb.g;
    b_self += nb.b;
    terms.push_back({nb.node, -nb.g, -nb.b});
  }
  terms.push_back({i, g_self, b_self});
  return terms;
}

std::vector<VoltageTerm> branch_terms(const NetworkModel& net, int from, int to) {
  const Neighbor y = net.branch_admittance(from, to);
  return {{from, y.g, y.b}, {to, -y.g, -y.b}};
}

GridCurrent evaluate(const NetworkState& s, const std::vector<VoltageTerm>& terms) {
  GridCurrent out;
  for (const VoltageTerm& t : terms) {
    const double re = s.v(t.node) * std::cos(s.theta(t.node));
    const double im = s.v(t.node) * std::sin(s.theta(t.node));
    out.i_D += t.g * re - t.b * im;
    out.i_Q += t.b * re + t.g * im;
  }
  return out;
}

NetworkJacobian differentiate(const NetworkState& s,
                              const std::vector<VoltageTerm>& terms) {
  const int n = s.size();
  NetworkJacobian jac = NetworkJacobian::Zero(2, 2 * n);
  for (const VoltageTerm& t : terms) {
    const double c = std::cos(s.theta(t.node));
    const double sn = std::sin(s.theta(t.node));
    const double v = s.v(t.node);
    jac(0, t.node) += t.g * c - t.b * sn;
    jac(1, t.node) += t.b * c + t.g * sn;
    jac(0, n + t.node) += -t.g * v * sn - t.b * v * c;
    jac(1, n + t.node) += -t.b * v * sn + t.g * v * c;
  }
  return jac;
}

std::vector<VoltageTerm> current_terms(const NetworkModel& net,
                                       const MeasurementSpec& spec) {
  return spec.kind == MeasurementKind::CurrentFlow
             ? branch_terms(net, spec.node, spec.to)
             : injection_terms(net, spec.node);
}

}  // namespace

NetworkModel::NetworkModel(int n, std::vector<Branch> branches,
                           std::vector<Shunt> shunts, std::vector<int> gen_nodes,
                           std::vector<int> zero_nodes, double s_b)
    : n_(n),
      branches_(std::move(branches)),
      shunts_(std::move(shunts)),
      gen_nodes_(std::move(gen_nodes)),
      zero_nodes_(std::move(zero_nodes)),
      s_b_(s_b) {
  if (n_ <= 0) throw InvalidParameters("network needs at least one node");
  if (!(s_b_ > 0.0)) throw InvalidParameters("base power must be positive");
  if (shunts_.empty()) shunts_.resize(n_);
  if (static_cast<int>(shunts_.size()) != n_) {
    throw InvalidParameters("shunt list length differs from node count");
  }
  adjacency_.assign(n_, {});
  for (const Branch& br : branches_) {
    if (br.from < 0 || br.from >= n_ || br.to < 0 || br.to >= n_) {
      throw InvalidParameters("branch endpoint out of range");
    }
    if (br.from == br.to) throw InvalidParameters("branch endpoints must differ");
    auto add = [&](int a, int b) {
      auto& list = adjacency_[a];
      auto it = std::find_if(list.begin(), list.end(),
                             [&](const Neighbor& nb) { return nb.node == b; });
      if (it == list.end()) {
        list.push_back({b, br.g, br.b});
      } else {
        it->g += br.g;
        it->b += br.b;
      }
    };
    add(br.from, br.to);
    add(br.to, br.from);
  }
  for (int i : gen_nodes_) check_node(i);
  for (int i : zero_nodes_) {
    check_node(i);
    if (std::find(gen_nodes_.begin(), gen_nodes_.end(), i) != gen_nodes_.end()) {
      throw InvalidParameters("node " + std::to_string(i + 1) +
                              " is both a generator and a zero-injection node");
    }
  }
}

const std::vector<Neighbor>& NetworkModel::neighbors(int i) const {
  check_node(i);
  return adjacency_[i];
}

void NetworkModel::check_node(int i) const {
  if (i < 0 || i >= n_) {
    throw OutOfRange("node " + std::to_string(i + 1) + " out of range 1.." +
                     std::to_string(n_));
  }
}

bool NetworkModel::has_branch(int from, int to) const {
  if (from < 0 || from >= n_ || to < 0 || to >= n_) return false;
  const auto& list = adjacency_[from];
  return std::any_of(list.begin(), list.end(),
                     [&](const Neighbor& nb) { return nb.node == to; });
}

Neighbor NetworkModel::branch_admittance(int from, int to) const {
  check_node(from);
  check_node(to);
  for (const Neighbor& nb : adjacency_[from]) {
    if (nb.node == to) return nb;
  }
  throw OutOfRange("no branch " + std::to_string(from + 1) + "-" +
                   std::to_string(to + 1));
}

NetworkModel NetworkModel::with_shunt_change(int node, double dg, double db) const {
  check_node(node);
  NetworkModel copy = *this;
  copy.shunts_[node].g += dg;
  copy.shunts_[node].b += db;
  return copy;
}

NetworkModel NetworkModel::with_node_sets(std::vector<int> gen_nodes,
                                          std::vector<int> zero_nodes) const {
  return NetworkModel(n_, branches_, shunts_, std::move(gen_nodes),
                      std::move(zero_nodes), s_b_);
}

NetworkState NetworkState::flat(int n) {
  return {Eigen::VectorXd::Ones(n), Eigen::VectorXd::Zero(n)};
}

MeasurementSpec MeasurementSpec::voltage(int node, double variance) {
  return {MeasurementKind::VoltagePhasor, node, -1, variance};
}

MeasurementSpec MeasurementSpec::flow(int from, int to, double variance) {
  return {MeasurementKind::CurrentFlow, from, to, variance};
}

MeasurementSpec MeasurementSpec::injection(int node, double variance) {
  return {MeasurementKind::CurrentInjection, node, -1, variance};
}

std::string MeasurementSpec::label() const {
  switch (kind) {
    case MeasurementKind::VoltagePhasor:
      return "V" + std::to_string(node + 1);
    case MeasurementKind::CurrentFlow:
      return "I" + std::to_string(node + 1) + "-" + std::to_string(to + 1);
    case MeasurementKind::CurrentInjection:
      return "J" + std::to_string(node + 1);
  }
  return "?";
}

void MeasurementSpec::validate(const NetworkModel& net) const {
  net.check_node(node);
  if (kind == MeasurementKind::CurrentFlow && !net.has_branch(node, to)) {
    throw OutOfRange("measurement " + label() + " refers to a missing branch");
  }
  if (!(variance >= 0.0)) {
    throw InvalidParameters("measurement " + label() + " has negative variance");
  }
}

std::string scalar_channel_label(const std::vector<MeasurementSpec>& specs,
                                 int scalar_channel) {
  if (scalar_channel < 0 || scalar_channel >= 2 * static_cast<int>(specs.size())) {
    throw OutOfRange("scalar channel " + std::to_string(scalar_channel) +
                     " out of range");
  }
  return specs[scalar_channel / 2].label() +
         (scalar_channel % 2 == 0 ? ".mag" : ".ang");
}

int scalar_channel_index(const std::vector<MeasurementSpec>& specs,
                         const std::string& label) {
  for (int k = 0; k < 2 * static_cast<int>(specs.size()); ++k) {
    if (scalar_channel_label(specs, k) == label) return k;
  }
  throw OutOfRange("unknown measurement channel '" + label + "'");
}

GridCurrent nodal_injection(const NetworkState& s, const NetworkModel& net, int i) {
  net.check_node(i);
  return evaluate(s, injection_terms(net, i));
}

GridCurrent branch_current(const NetworkState& s, const NetworkModel& net,
                           int from, int to) {
  return evaluate(s, branch_terms(net, from, to));
}

Phasor measure(const NetworkState& s, const NetworkModel& net,
               const MeasurementSpec& spec) {
  if (spec.kind == MeasurementKind::VoltagePhasor) {
    net.check_node(spec.node);
    return {s.v(spec.node), s.theta(spec.node), false};
  }
  const GridCurrent i = evaluate(s, current_terms(net, spec));
  const double mag = std::hypot(i.i_D, i.i_Q);
  return {mag, std::atan2(i.i_Q, i.i_D), mag < kDegenerateCurrent};
}

NetworkJacobian nodal_injection_jacobian(const NetworkState& s,
                                         const NetworkModel& net, int i) {
  net.check_node(i);
  return differentiate(s, injection_terms(net, i));
}

NetworkJacobian branch_current_jacobian(const NetworkState& s,
                                        const NetworkModel& net, int from,
                                        int to) {
  return differentiate(s, branch_terms(net, from, to));
}

NetworkJacobian measure_jacobian(const NetworkState& s, const NetworkModel& net,
                                 const MeasurementSpec& spec) {
  const int n = s.size();
  if (spec.kind == MeasurementKind::VoltagePhasor) {
    net.check_node(spec.node);
    NetworkJacobian jac = NetworkJacobian::Zero(2, 2 * n);
    jac(0, spec.node) = 1.0;
    jac(1, n + spec.node) = 1.0;
    return jac;
  }
  const auto terms = current_terms(net, spec);
  const GridCurrent i = evaluate(s, terms);
  const NetworkJacobian d = differentiate(s, terms);
  const double mag2 = i.i_D * i.i_D + i.i_Q * i.i_Q;
  const double mag = std::sqrt(mag2);
  NetworkJacobian jac = NetworkJacobian::Zero(2, 2 * n);
  if (mag < kDegenerateCurrent) return jac;
  jac.row(0) = (i.i_D * d.row(0) + i.i_Q * d.row(1)) / mag;
  jac.row(1) = (i.i_D * d.row(1) - i.i_Q * d.row(0)) / mag2;
  return jac;
}

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a, two_pi);
  if (r > std::numbers::pi) r -= two_pi;
  if (r <= -std::numbers::pi) r += two_pi;
  return r;
}

}  // namespace mhese
