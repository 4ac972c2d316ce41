"""Smoke test for the gatedgan extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
or `cargo build -p gatedgan-py --features extension-module` and copy
`target/debug/libgatedgan_py.so` to `gatedgan.so` on the import path.
"""

import json
import struct
import sys
import tempfile
import zlib
from pathlib import Path

import gatedgan


def png_size(data: bytes) -> tuple[int, int]:
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    return struct.unpack(">II", data[16:24])


def write_png(path: Path, size: int, rgb: tuple[int, int, int]) -> None:
    raw = b"".join(b"\x00" + bytes(rgb) * size for _ in range(size))

    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


def main() -> int:
    ckpt = gatedgan.Checkpoint.random(16, gates="off:4-8", seed=3, latent_dim=16, w_mean_samples=256)
    print(ckpt)
    assert (ckpt.resolution, ckpt.num_ws) == (16, 6)

    a = ckpt.generate(1, 2)
    assert a == ckpt.generate(1, 2), "generation is not deterministic"
    assert png_size(a) == (16, 16)
    assert len(ckpt.generate_pixels(1, 2)) == 16 * 16 * 3

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ckpt.save(tmp / "toy.ckpt")
        again = gatedgan.Checkpoint.load(tmp / "toy.ckpt")
        assert again.generate(1, 2) == a

        basis = gatedgan.PcaBasis.compute(ckpt, n_samples=128, seed=0)
        assert basis.orthonormality_error() < 1e-5
        assert basis.variances == sorted(basis.variances, reverse=True)

        session = {"model_id": "toy", "latent_seed": 1, "noise_seed": 2,
                   "pca_edits": [{"direction_index": 0, "weight": 2.0}]}
        edited = ckpt.render_session(json.dumps(session), basis)
        assert edited != a
        try:
            ckpt.render_session(json.dumps({**session, "truncation": 9.0}), basis)
        except ValueError as e:
            assert "truncation" in str(e)
        else:
            raise AssertionError("out-of-range truncation accepted")

        archive, mse = gatedgan.project(ckpt, a, model_id="toy", steps=30)
        assert mse >= 0.0
        restored = gatedgan.LatentArchive.from_bytes(archive.to_bytes())
        assert restored.model_id == "toy" and len(restored.w_plus) == 6
        assert png_size(restored.render(ckpt)) == (16, 16)
        other = gatedgan.Checkpoint.random(32, seed=3, latent_dim=16, w_mean_samples=64)
        try:
            restored.render(other)
        except ValueError as e:
            assert "architecture" in str(e)
        else:
            raise AssertionError("mismatched archive rendered")

        data = tmp / "data"
        data.mkdir()
        for i in range(4):
            write_png(data / f"{i}.png", 16, (40 * i, 200 - 30 * i, 90))
        value = gatedgan.fid(ckpt, data, n=8, extractor_id="randproj")
        assert value > 0.0
        assert gatedgan.noise_sensitivity(ckpt.with_gates("off"), n=8, extractor_id="randproj") == 0.0
        trained = gatedgan.train(data, 16, steps=2, gates="off:4-8", batch=2, w_mean_samples=32)
        assert trained.gates == "off:4-8,on:16-16"

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
