"""Median forward time of the full network and its variants at a few sizes."""
import torch

from sllen.net import SLLEN, NetConfig, Variant, count_parameters
from sllen.ssn import SsnConfig, build_ssn
from sllen.trainer import time_inference

torch.set_num_threads(1)
ssn = build_ssn(SsnConfig())
for v in Variant:
    net = SLLEN(NetConfig(base_channels=16, variant=v)).eval()
    rows = time_inference(net, [64, 128], repeats=3, ssn=ssn)
    times = "  ".join(f"{r['height']}px {r['median_s'] * 1000:7.1f} ms" for r in rows)
    print(f"{v.value:7s} {count_parameters(net):>8d} params  {times}")
