# coding: utf-8

# # Centralized OPF against chance-constrained ADMM
#
# Seven PV inverters sit on the 33-bus feeder. We solve the deterministic
# centralized problem first, then the decentralized problem for several
# violation tolerances.

from ccdopf.admm import AdmmConfig, run_admm
from ccdopf.config import fleet_config
from ccdopf.distflow import branch_voltage_profile
from ccdopf.netmodel import case33bw
from ccdopf.opf import solve_centralized

net = case33bw()
cfg = fleet_config()
specs = cfg.specs(net)
base = net.base_mva

central = solve_centralized(net, specs)
print("centralized: losses %.4f MW, total q %.4f MVAr" % (
    central.losses * base, central.injections.total_q() * base))

# ## Sweeping epsilon
#
# A larger tolerance shrinks the safety margin on the power-factor coupling,
# which leaves more room for reactive support.

runs = {}
for eps in (0.01, 0.05, 0.1, 0.2):
    res = run_admm(net, specs, cfg.model(net, epsilon=eps), AdmmConfig())
    runs[eps] = res
    print("eps %-5g %3d iterations  losses %.4f MW  total q %.4f MVAr" % (
        eps, res.iterations, res.solution.losses * base, res.solution.injections.total_q() * base))

# The trace records the residuals each round. Convergence is slow on the long
# trunk because consensus information moves one bus per round.

trace = runs[0.05].trace.records
for rec in trace[::100] + [trace[-1]]:
    print("  iter %3d  primal %.1e  dual %.1e" % (rec["iter"], rec["primal_res"], rec["dual_res"]))

# ## Voltage profiles
#
# Every centralized profile falls toward the leaf. The decentralized solution
# shows a small rise inside the branch that ends at bus 22.

for name, sol in (("centralized", central), ("admm eps=0.05", runs[0.05].solution)):
    prof = branch_voltage_profile(net, sol.state, 22)
    print(name, " ".join("%d:%.5f" % bv for bv in prof))

# ## Per-inverter set points

for n in cfg.nodes:
    print("  bus %2d  central %.4f  admm %.4f MVAr" % (
        n, central.injections.q(n) * base, runs[0.05].solution.injections.q(n) * base))
