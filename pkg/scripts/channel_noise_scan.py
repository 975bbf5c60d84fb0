"""Measured BER and true capacity of the covert channel across noise levels."""
import argparse

from schedq.channel import ChannelConfig, run_channel_experiment, true_capacity
from schedq.simcore import Engine
from schedq.uarch import load_machine_config

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--machine", default="Zen3")
ap.add_argument("--messages", type=int, default=2)
ap.add_argument("--seed", type=int, default=1)
args = ap.parse_args()

cfg = load_machine_config(args.machine)
engine = Engine(cfg)
print("flip_prob,ber,true_capacity_bps,bsc_capacity_bps,lost_packets")
for p in (0.0, 0.001, 0.004, 0.007, 0.015, 0.05, 0.1):
    rep = run_channel_experiment(cfg, engine, args.messages, args.seed,
                                 ChannelConfig(noise_flip_prob=p))
    print(f"{p},{rep.ber:.6f},{rep.true_capacity_bps:.2f},{true_capacity(1000, p):.2f},"
          f"{rep.lost_packets}")
