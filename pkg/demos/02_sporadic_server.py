"""
Sporadic servers on one PCPU
============================

Build a scheduler by hand, watch budgets move between foreground and
background, and audit the result with the sliding-window checker.
"""

from questsim import aligned_service, load_scenario, run, window_check
from questsim.generate import backlogged_scenario
from questsim.scheduler import Flavor, Job, PcpuScheduler, Vcpu, VcpuParams, rms_admission, window_sums

# two VCPUs, both with more work than budget
s = PcpuScheduler(0, 1, check=True)
a = s.add_vcpu(Vcpu("A", Flavor.MAIN, VcpuParams(2000, 5000), 0, 1))
b = s.add_vcpu(Vcpu("B", Flavor.MAIN, VcpuParams(3000, 10_000), 0, 1))
print(rms_admission([a.params, b.params]).to_dict())
s.enqueue(a, Job("a", "thread", 0, 50_000, 0), 0)
s.enqueue(b, Job("b", "thread", 0, 50_000, 0), 0)
s.finish(20_000)
for seg in s.segments:
    mode = "fg" if seg["foreground"] else "bg"
    print(f"  [{seg['time_start']:6d}, {seg['time_end']:6d}) {seg['vcpu']} {mode}")

for v in (a, b):
    rep = window_check(s.segments, v.id, v.params.budget, v.params.period, 20_000)
    print(f"{v.id}: worst window {rep.max_window} of C_max {rep.budget} at t={rep.worst_start}")

# %% chunked vs single replenishment
def counterexample(chunked):
    s = PcpuScheduler(0, 1, chunked=chunked)
    h = s.add_vcpu(Vcpu("H", Flavor.MAIN, VcpuParams(8, 9), 0, 1))
    a = s.add_vcpu(Vcpu("A", Flavor.MAIN, VcpuParams(5, 10), 0, 1))
    s.enqueue(a, Job("a", "thread", 0, 100, 0), 0)
    s.run_until(1)
    s.enqueue(h, Job("h", "thread", 1, 8, 0), 1)
    s.finish(40)
    return s


for chunked in (True, False):
    sums = window_sums(counterexample(chunked).segments, "A", 10, 40)
    print(f"chunked={chunked}: max A foreground in any 10us window = {sums.max()}")

# %% per-period service under permanent backlog
tr = run(load_scenario(backlogged_scenario([VcpuParams(1, 3), VcpuParams(1, 4)], 48)))
for vid in ("v0", "v1"):
    print(vid, "service per aligned period:", aligned_service(tr, vid), "| window check:", window_check(tr, vid).passed)
