#!/usr/bin/env python3
"""Writes the small NIfTI-1 fixtures used by crates/core/tests/nifti_io.rs.

Built with struct only, independent of the Rust writer. Rerun after edits:

    python3 tools/make_nifti_fixtures.py
"""
import gzip
import io
import os
import struct

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")

DT = {"u8": (2, "B", 8), "i16": (4, "h", 16), "f32": (16, "f", 32), "f64": (64, "d", 64), "u16": (512, "H", 16)}


def header(order, dims, dtype, pixdim=(1.0, 2.0, 2.0, 2.0, 0.8), slope=1.0, inter=0.0,
           vox_offset=352.0, sizeof=348, magic=b"n+1\0", ext=0, units=10, dim0=None,
           datatype_code=None, sform=True):
    code, _, bitpix = DT[dtype]
    if datatype_code is not None:
        code = datatype_code
    b = bytearray(352)
    struct.pack_into(order + "i", b, 0, sizeof)
    dim = [len(dims) if dim0 is None else dim0] + list(dims)
    dim += [1] * (8 - len(dim))
    struct.pack_into(order + "8h", b, 40, *dim)
    struct.pack_into(order + "hh", b, 70, code, bitpix)
    pd = list(pixdim) + [0.0] * (8 - len(pixdim))
    struct.pack_into(order + "8f", b, 76, *pd)
    struct.pack_into(order + "fff", b, 108, vox_offset, slope, inter)
    b[123] = units
    if sform:
        struct.pack_into(order + "hh", b, 252, 0, 1)
        struct.pack_into(order + "4f", b, 280, pixdim[1], 0.0, 0.0, -10.0)
        struct.pack_into(order + "4f", b, 296, 0.0, pixdim[2], 0.0, -20.0)
        struct.pack_into(order + "4f", b, 312, 0.0, 0.0, pixdim[3], -30.0)
    b[344:348] = magic
    b[348] = ext
    return bytes(b)


def body(order, dtype, values):
    fmt = DT[dtype][1]
    return b"".join(struct.pack(order + fmt, v) for v in values)


def write(name, data):
    path = os.path.join(OUT, name)
    with open(path, "wb") as f:
        f.write(data)
    assert len(data) <= 1024, (name, len(data))


def gz(data):
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as f:
        f.write(data)
    return buf.getvalue()


def main():
    os.makedirs(OUT, exist_ok=True)
    # golden 4D float volume: value = 0.25 * i - 3 in file order
    dims4 = (3, 2, 2, 3)
    n4 = 3 * 2 * 2 * 3
    vals = [0.25 * i - 3.0 for i in range(n4)]
    for tag, order in (("le", "<"), ("be", ">")):
        write(f"golden_f32_{tag}.nii", header(order, dims4, "f32") + body(order, "f32", vals))
        write(f"golden_f64_{tag}.nii", header(order, dims4, "f64") + body(order, "f64", vals))
    write("golden_f32_le.nii.gz", gz(header("<", dims4, "f32") + body("<", "f32", vals)))

    # int16 with scaling: stored i - 6, slope 0.5, intercept 1 → 0.5*(i-6)+1
    ivals = [i - 6 for i in range(n4)]
    for tag, order in (("le", "<"), ("be", ">")):
        write(f"scaled_i16_{tag}.nii",
              header(order, dims4, "i16", slope=0.5, inter=1.0) + body(order, "i16", ivals))

    # 3D atlas: label = (x + 2*y + 4*z) % 5 on 4x3x2
    dims3 = (4, 3, 2)
    labels = [(x + 2 * y + 4 * z) % 5 for z in range(2) for y in range(3) for x in range(4)]
    for tag, order in (("le", "<"), ("be", ">")):
        write(f"atlas_u8_{tag}.nii", header(order, dims3, "u8", pixdim=(1.0, 1.5, 1.5, 1.5)) + body(order, "u8", labels))
        write(f"atlas_u16_{tag}.nii", header(order, dims3, "u16", pixdim=(1.0, 1.5, 1.5, 1.5)) + body(order, "u16", labels))

    # malformed, one per error variant
    good = header("<", dims4, "f32")
    data = body("<", "f32", vals)
    write("bad_header_truncated.nii", good[:200])
    write("bad_sizeof_hdr.nii", header("<", dims4, "f32", sizeof=347) + data)
    write("bad_nifti2.nii", header("<", dims4, "f32", sizeof=540, dim0=0) + data)
    write("bad_magic.nii", header("<", dims4, "f32", magic=b"abc\0") + data)
    write("bad_paired.nii", header("<", dims4, "f32", magic=b"ni1\0") + data)
    write("bad_rank.nii", header("<", (2, 2, 2, 2, 2), "f32") + body("<", "f32", [0.0] * 32))
    write("bad_dim.nii", header("<", (3, 0, 2, 3), "f32") + data)
    write("bad_datatype.nii", header("<", dims4, "f32", datatype_code=128) + data)
    write("bad_vox_offset.nii", header("<", dims4, "f32", vox_offset=100.0) + data)
    write("bad_extension.nii", header("<", dims4, "f32", ext=1) + data)
    write("bad_data_truncated.nii", good + data[:20])
    write("bad_float_labels.nii", header("<", dims3, "f32") + body("<", "f32", [float(l) for l in labels]))
    neg = [l - 1 for l in labels]
    write("bad_negative_label.nii", header("<", dims3, "i16") + body("<", "i16", neg))
    write("bad_label_frames.nii", header("<", (4, 3, 2, 2), "u8") + body("<", "u8", labels * 2))


if __name__ == "__main__":
    main()
