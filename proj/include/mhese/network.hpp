#pragma once

// Static network: series branches plus nodal shunts, nodal current balance and
// PMU measurement functions over the polar nodal voltages.
//
// Nodes are 0-based in the C++ API. Configuration files and channel labels
// use 1-based node numbers.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mhese/genmodel.hpp"

namespace mhese {

struct Branch {
  int from = 0;
  int to = 0;
  double g = 0.0;
  double b = 0.0;
};

struct Shunt {
  double g = 0.0;
  double b = 0.0;
};

/// Neighbor entry: adjacent node and the admittance of the connecting branch.
/// Parallel branches are merged.
struct Neighbor {
  int node = 0;
  double g = 0.0;
  double b = 0.0;
};

class NetworkModel {
 public:
  NetworkModel() = default;

  /// Throws InvalidParameters if any invariant is violated (node sets overlap,
  /// branch endpoints out of range or equal, non-positive base power).
  NetworkModel(int n, std::vector<Branch> branches, std::vector<Shunt> shunts,
               std::vector<int> gen_nodes, std::vector<int> zero_nodes,
               double s_b);

  int size() const { return n_; }
  double base_power() const { return s_b_; }
  const std::vector<Branch>& branches() const { return branches_; }
  const std::vector<Shunt>& shunts() const { return shunts_; }
  const std::vector<int>& gen_nodes() const { return gen_nodes_; }
  const std::vector<int>& zero_nodes() const { return zero_nodes_; }
  const std::vector<Neighbor>& neighbors(int i) const;

  bool has_branch(int from, int to) const;
  /// Merged series admittance between two adjacent nodes.
  Neighbor branch_admittance(int from, int to) const;

  /// Copy with shunt admittance of one node changed by (dg, db).
  NetworkModel with_shunt_change(int node, double dg, double db) const;
  /// Copy with different node-set assignments (same electrical data).
  NetworkModel with_node_sets(std::vector<int> gen_nodes,
                              std::vector<int> zero_nodes) const;

  void check_node(int i) const;

 private:
  int n_ = 0;
  std::vector<Branch> branches_;
  std::vector<Shunt> shunts_;
  std::vector<int> gen_nodes_;
  std::vector<int> zero_nodes_;
  double s_b_ = 1.0;
  std::vector<std::vector<Neighbor>> adjacency_;
};

/// Polar nodal voltages.
struct NetworkState {
  Eigen::VectorXd v;
  Eigen::VectorXd theta;

  static NetworkState flat(int n);
  int size() const { return static_cast<int>(v.size()); }
};

enum class MeasurementKind { VoltagePhasor, CurrentFlow, CurrentInjection };

/// One PMU phasor channel. It yields two scalars: magnitude then phase.
struct MeasurementSpec {
  MeasurementKind kind = MeasurementKind::VoltagePhasor;
  int node = 0;  // measured node, or 'from' end of a flow
  int to = -1;   // 'to' end of a flow
  double variance = 1e-6;

  static MeasurementSpec voltage(int node, double variance = 1e-6);
  static MeasurementSpec flow(int from, int to, double variance = 1e-6);
  static MeasurementSpec injection(int node, double variance = 1e-6);

  /// Channel label with 1-based nodes, e.g. "V3", "I4-5", "J2".
  std::string label() const;
  /// Throws OutOfRange/InvalidParameters if the channel does not fit `net`.
  void validate(const NetworkModel& net) const;
};

/// Label of a scalar channel: 2*k is "<label>.mag", 2*k+1 is "<label>.ang".
std::string scalar_channel_label(const std::vector<MeasurementSpec>& specs,
                                 int scalar_channel);
/// Inverse of scalar_channel_label; throws OutOfRange for unknown labels.
int scalar_channel_index(const std::vector<MeasurementSpec>& specs,
                         const std::string& label);

/// Currents whose magnitude falls below this have an undefined phase.
inline constexpr double kDegenerateCurrent = 1e-9;

struct Phasor {
  double magnitude = 0.0;
  double phase = 0.0;
  bool degenerate = false;
};

/// Net current leaving node i into the series branches and its shunt.
GridCurrent nodal_injection(const NetworkState& s, const NetworkModel& net, int i);

/// Series current at the 'from' end of branch (from, to), positive toward 'to'.
GridCurrent branch_current(const NetworkState& s, const NetworkModel& net,
                           int from, int to);

/// Noise-free PMU reading of one channel.
Phasor measure(const NetworkState& s, const NetworkModel& net,
               const MeasurementSpec& spec);

/// Jacobian of a two-row quantity with respect to the network state. Columns
/// 0..n-1 are v, columns n..2n-1 are theta.
using NetworkJacobian = Eigen::Matrix<double, 2, Eigen::Dynamic>;

NetworkJacobian nodal_injection_jacobian(const NetworkState& s,
                                         const NetworkModel& net, int i);
NetworkJacobian branch_current_jacobian(const NetworkState& s,
                                        const NetworkModel& net, int from, int to);
/// Rows (magnitude, phase). Degenerate current channels get a zero phase row.
NetworkJacobian measure_jacobian(const NetworkState& s, const NetworkModel& net,
                                 const MeasurementSpec& spec);

/// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

}  // namespace mhese
