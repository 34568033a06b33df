# coding: utf-8

# # Local inverter policies on the 33-bus feeder
#
# We load the bundled case, look at the base power flow, then attach one PV
# inverter at bus 5 and sweep the droop gain of the two flow-based policies.

import numpy as np

from ccdopf.config import node5_config
from ccdopf.distflow import branch_voltage_profile, solve_lindistflow, total_losses
from ccdopf.netmodel import case33bw
from ccdopf.opf import reference_setpoints, solve_centralized
from ccdopf.policies import CASE_PERTURBATIONS, PolicyKind, PolicyParams, droop_sweep, sweep_breakpoint

net = case33bw()
print(net.n_bus, "buses,", len(net.branches), "branches, base", net.base_mva, "MVA")

# ## Base case
#
# With no PV the voltage falls monotonically toward every leaf. Bus 18 is the
# far end of the main trunk.

state = solve_lindistflow(net)
print("losses %.4f MW" % (total_losses(net, state) * net.base_mva))
for bus, v in branch_voltage_profile(net, state, 18)[::4]:
    print("  bus %2d  v = %.4f" % (bus, v))

# ## One inverter at bus 5
#
# S = 0.5 MVA and p = 0.3 MW leave +/-0.4 MVAr of reactive range. The
# reference set points come from the loss-minimizing OPF on the unperturbed
# feeder.

specs = node5_config().specs(net)
opt = solve_centralized(net, specs)
refs = reference_setpoints(opt, net, specs)
print("reference q = %.3f MVAr, losses %.4f MW" % (refs[0].q_ref * net.base_mva, opt.losses * net.base_mva))

# ## Droop sweeps
#
# Case I raises the load at bus 5 by half, Case II the load at bus 33. The
# breakpoint is the droop after which the inverter output stops changing.

ks = list(np.round(np.arange(0, 20.5, 0.5), 10))
kinds = [PolicyKind.NONE, PolicyKind.LOSS_MIN, PolicyKind.FLOW_REACTIVE, PolicyKind.FLOW_ACTIVE_REACTIVE]
for variant in ("I", "II"):
    print("\nCase", variant)
    for kind in kinds:
        pts = droop_sweep(net, refs, PolicyParams(kind), ks, CASE_PERTURBATIONS[variant])
        print("  %-22s K=0: %.5f MW  K=20: %.5f MW  breakpoint K=%g" % (
            kind.value, pts[0].losses * net.base_mva, pts[-1].losses * net.base_mva, sweep_breakpoint(pts)))

# In Case I the reference already puts the inverter at its rating, so every
# curve is flat. In Case II the joint active/reactive policy keeps lowering
# losses until K = 3.5, while reactive-only control is already saturated.
