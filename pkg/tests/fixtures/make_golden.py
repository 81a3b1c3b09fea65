"""Regenerate the ZBRA golden files by assembling bytes by hand (no codec import)."""
import struct
from pathlib import Path

HERE = Path(__file__).parent


def header(dtype, C, H, W, block):
    return b"ZBRA" + bytes([1, dtype]) + struct.pack("<IIIH", C, H, W, block)


def main():
    # 1x4x4 all zero, block 4, f32: header + one empty bitmask byte
    (HERE / "zeros_1x4x4_b4_f32.zbra").write_bytes(header(0, 1, 4, 4, 4) + b"\x00")

    # 1x4x4 holding 0.0, 0.5, ..., 7.5 in raster order, single block kept, f32
    values = [0.5 * i for i in range(16)]
    (HERE / "ramp_1x4x4_b4_f32.zbra").write_bytes(
        header(0, 1, 4, 4, 4) + b"\x80" + b"".join(struct.pack("<f", v) for v in values)
    )

    # 2x4x4, block 2, u8. Element (c, y, x) = 16*c + 4*y + x + 1.
    # Blocks in order c0:(0,0)(0,1)(1,0)(1,1) c1:(0,0)(0,1)(1,0)(1,1);
    # keep pattern 1,0,0,1, 0,1,1,0 -> bitmask 0b10010110 = 0x96
    def block(c, by, bx):
        return bytes(16 * c + 4 * (2 * by + dy) + (2 * bx + dx) + 1 for dy in range(2) for dx in range(2))

    payload = block(0, 0, 0) + block(0, 1, 1) + block(1, 0, 1) + block(1, 1, 0)
    (HERE / "mixed_2x4x4_b2_u8.zbra").write_bytes(header(2, 2, 4, 4, 2) + b"\x96" + payload)

    # 1x2x6, block 2, f16: 3 blocks, middle one pruned -> bitmask 0b10100000
    vals = [1.0, 2.0, 0.0, 0.0, -3.5, 0.25, 4.0, 8.0, 0.0, 0.0, 65504.0, -0.0]  # rows of 6
    blocks = [[vals[0], vals[1], vals[6], vals[7]], [vals[4], vals[5], vals[10], vals[11]]]
    (HERE / "f16_1x2x6_b2.zbra").write_bytes(
        header(1, 1, 2, 6, 2) + b"\xa0" + b"".join(struct.pack("<e", v) for b in blocks for v in b)
    )


if __name__ == "__main__":
    main()
