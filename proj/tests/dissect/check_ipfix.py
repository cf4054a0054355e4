#!/usr/bin/env python3
"""Decode flowkit_dump ipfix output with scapy and compare field by field."""
import glob
import ipaddress
import os
import subprocess
import sys
import tempfile

from scapy.layers.netflow import NetflowDataflowsetV9, NetflowHeader, netflowv9_defragment


def scapy_lines(files):
    packets = [NetflowHeader(open(f, "rb").read()) for f in files]
    out = []
    for name, pkt in zip(files, netflowv9_defragment(packets)):
        layer = pkt.getlayer(NetflowDataflowsetV9)
        while layer is not None:
            for rec in layer.records:
                f = rec.fields
                if "IPV4_SRC_ADDR" in f:
                    ver, src, dst = 4, f["IPV4_SRC_ADDR"], f["IPV4_DST_ADDR"]
                else:
                    ver, src, dst = 6, f["IPV6_SRC_ADDR"], f["IPV6_DST_ADDR"]
                src = str(ipaddress.ip_address(src))
                dst = str(ipaddress.ip_address(dst))
                out.append(" ".join(str(x) for x in (
                    os.path.basename(name), ver, src, dst, f["PROTOCOL"], f["L4_SRC_PORT"], f["L4_DST_PORT"],
                    f["TCP_FLAGS"], f["IN_PKTS"], f["IN_BYTES"], f["flowStartMilliseconds"],
                    f["flowEndMilliseconds"])))
            layer = layer.payload.getlayer(NetflowDataflowsetV9)
    return out


def main():
    if len(sys.argv) < 2:
        print("usage: check_ipfix.py <flowkit_dump> [flows] [seed]")
        return 2
    flows = sys.argv[2] if len(sys.argv) > 2 else "10000"
    seed = sys.argv[3] if len(sys.argv) > 3 else "42"
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.argv[1], "ipfix", tmp, seed, flows], check=True)
        files = sorted(glob.glob(os.path.join(tmp, "msg-*.bin")))
        expected = open(os.path.join(tmp, "expected.txt")).read().splitlines()
        got = scapy_lines(files)
    mismatches = sum(1 for a, b in zip(expected, got) if a != b) + abs(len(expected) - len(got))
    for a, b in zip(expected, got):
        if a != b:
            print("expected:", a)
            print("scapy:   ", b)
            break
    print(f"records={len(expected)} datagrams={len(files)} mismatches={mismatches}")
    return 0 if mismatches == 0 and len(expected) == int(flows) else 1


if __name__ == "__main__":
    sys.exit(main())
