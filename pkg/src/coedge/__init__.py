"""coedge: collaborative edge offloading simulator with guided multi-agent RL.

Layout:
    model       pure delay/reliability/outcome arithmetic
    env         time-slotted multi-agent offloading environment
    heuristics  non-learned decision policies
    oracle      exact solver for small static instances + bin-packing reduction
    nn          minimal float64 autodiff kernel (layers, attention, losses, Adam)
    mappo       PPO with centralized critic over the environment
    guidance    prompt/memory/reflection pipeline with pluggable providers
    fusion      guidance-feature fusion on top of the PPO trainer
    harness     experiment runner, sweeps, latency profiling, metrics CSV
    cli         command line entry points
"""

__version__ = "0.1.0"
