"""
Rogue sandboxes
===============

Let every sandbox misbehave at random: read and write foreign RAM and
device memory, probe PCI functions it was not given, and try to steal
interrupt lines. Count what gets through.
"""

from collections import Counter

from questsim import load_scenario, run
from questsim.analysis import check_isolation, pci_mediation_report
from questsim.generate import fault_fuzz_scenario, pci_workload_scenario

kinds, outcomes = Counter(), Counter()
for seed in range(5):
    trace = run(load_scenario(fault_fuzz_scenario(seed, n_faults=50)))
    for f in trace.records["fault"]:
        kinds[f["kind"]] += 1
        outcomes["contained" if f["contained"] else f["outcome"]] += 1
print("injected:", dict(kinds))
print("outcomes:", dict(outcomes))

res = check_isolation(trace)
print("\nlast run:", "PASS" if res.passed else "FAIL")
for line in res.lines:
    print("  " + line)

v = trace.records["violation"][:5]
print("\nfirst violations logged by the monitors:")
for r in v:
    print(f"  t={r['time']}us sandbox {r['sandbox']} {r['kind']}: {r['detail']} -> {r['action']}")

# %% legitimate configuration traffic goes through single-step mediation
trace = run(load_scenario(pci_workload_scenario(0, accesses=40)))
print("\nPCI mediation:", pci_mediation_report(trace))
