"""File IO: raw+sidecar and single-file NIfTI-1."""

import struct

import numpy as np
import pytest

from mandseg.grid import Mask, Volume
from mandseg.volume_io import LoadError, load_mask, load_volume, save_mask, save_volume

SPACING = (1.12, 1.12, 3.0)


def make_volume(dtype, dims=(4, 3, 2)):
    rng = np.random.default_rng(42)
    if np.dtype(dtype).kind == "f":
        data = rng.normal(0, 500, size=dims).astype(dtype)
    else:
        info = np.iinfo(dtype)
        data = rng.integers(info.min, info.max, size=dims).astype(dtype)
    return Volume(data, SPACING)


class TestRaw:
    @pytest.mark.parametrize("dtype", [np.int16, np.uint8, np.float32])
    def test_round_trip(self, tmp_path, dtype):
        v = make_volume(dtype)
        path = str(tmp_path / "vol.raw")
        save_volume(v, path)
        back = load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.data.dtype == v.data.dtype
        assert back.spacing == v.spacing
        assert back.dims == v.dims

    def test_payload_is_x_fastest(self, tmp_path):
        data = np.zeros((2, 2, 1), dtype=np.int16)
        data[0, 0, 0] = 10
        data[1, 0, 0] = 20
        data[0, 1, 0] = 30
        data[1, 1, 0] = 40
        path = str(tmp_path / "vol.raw")
        save_volume(Volume(data, SPACING), path)
        flat = np.frombuffer(open(path, "rb").read(), dtype="<i2")
        assert flat.tolist() == [10, 20, 30, 40]

    def test_sidecar_contents(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        save_volume(make_volume(np.int16), path)
        meta = dict(
            line.split("=", 1) for line in open(path + ".meta").read().splitlines() if line
        )
        assert meta["dims"] == "4,3,2"
        assert meta["dtype"] == "i16"
        assert [float(s) for s in meta["spacing"].split(",")] == list(SPACING)

    def test_missing_sidecar(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        open(path, "wb").write(b"\x00" * 48)
        with pytest.raises(LoadError, match="missing sidecar"):
            load_volume(path)

    def test_truncated_payload(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        save_volume(make_volume(np.int16), path)
        payload = open(path, "rb").read()
        open(path, "wb").write(payload[:-2])
        with pytest.raises(LoadError, match="truncated data: expected 48 bytes, found 46"):
            load_volume(path)

    def test_bad_sidecar_fields(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        save_volume(make_volume(np.int16), path)

        def rewrite(**kv):
            meta = {"dims": "4,3,2", "spacing": "1,1,1", "dtype": "i16"}
            meta.update(kv)
            with open(path + ".meta", "w") as fh:
                for k, v in meta.items():
                    if v is not None:
                        fh.write("%s=%s\n" % (k, v))

        rewrite(dims="4,0,2")
        with pytest.raises(LoadError, match="nonpositive dimension"):
            load_volume(path)
        rewrite(dtype="i32")
        with pytest.raises(LoadError, match="unknown dtype 'i32'"):
            load_volume(path)
        rewrite(spacing="1,-1,1")
        with pytest.raises(LoadError, match="spacing"):
            load_volume(path)
        rewrite(dtype=None)
        with pytest.raises(LoadError, match="sidecar missing key 'dtype'"):
            load_volume(path)

    def test_malformed_sidecar_line(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        save_volume(make_volume(np.int16), path)
        with open(path + ".meta", "a") as fh:
            fh.write("just some words\n")
        with pytest.raises(LoadError, match="malformed sidecar line"):
            load_volume(path)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = str(tmp_path / "vol.raw")
        save_volume(make_volume(np.int16), path)
        original = open(path + ".meta").read()
        with open(path + ".meta", "w") as fh:
            fh.write("# spacing is in mm\n\n" + original)
        assert load_volume(path).dims == (4, 3, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_volume(str(tmp_path / "absent.raw"))


class TestNifti:
    @pytest.mark.parametrize("dtype", [np.int16, np.uint8, np.float32])
    def test_round_trip(self, tmp_path, dtype):
        v = make_volume(dtype)
        path = str(tmp_path / "vol.nii")
        save_volume(v, path)
        back = load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.data.dtype == v.data.dtype
        assert back.spacing == pytest.approx(v.spacing, abs=1e-6)

    def test_header_fields(self, tmp_path):
        path = str(tmp_path / "vol.nii")
        save_volume(make_volume(np.int16), path)
        raw = open(path, "rb").read()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 4, 3, 2)
        assert struct.unpack_from("<2h", raw, 70) == (4, 16)
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert raw[344:348] == b"n+1\x00"
        assert len(raw) == 352 + 4 * 3 * 2 * 2

    def test_big_endian_load(self, tmp_path):
        data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        hdr = bytearray(348)
        struct.pack_into(">i", hdr, 0, 348)
        struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into(">2h", hdr, 70, 4, 16)
        struct.pack_into(">8f", hdr, 76, 1.0, 1.0, 2.0, 3.0, 0, 0, 0, 0)
        struct.pack_into(">3f", hdr, 108, 348.0, 0.0, 0.0)
        path = str(tmp_path / "be.nii")
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(data.ravel(order="F").astype(">i2").tobytes())
        back = load_volume(path)
        assert np.array_equal(back.data, data)
        assert back.data.dtype == np.dtype("<i2")
        assert back.spacing == (1.0, 2.0, 3.0)

    def test_scaling_applied(self, tmp_path):
        data = np.array([[[1, 2], [3, 4]]], dtype=np.int16)  # (1, 2, 2)
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 3, 1, 2, 2, 1, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 4, 16)
        struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        struct.pack_into("<3f", hdr, 108, 348.0, 2.0, -3.0)
        path = str(tmp_path / "scl.nii")
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(data.ravel(order="F").tobytes())
        back = load_volume(path)
        assert back.data.dtype == np.float32
        assert np.allclose(back.data, data.astype(np.float32) * 2.0 - 3.0)

    def test_identity_scaling_keeps_integers(self, tmp_path):
        path = str(tmp_path / "vol.nii")
        save_volume(make_volume(np.int16), path)
        assert load_volume(path).data.dtype == np.int16

    def test_vox_offset_honored(self, tmp_path):
        data = np.full((2, 2, 2), 7, dtype=np.int16)
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 4, 16)
        struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        struct.pack_into("<3f", hdr, 108, 400.0, 0.0, 0.0)
        path = str(tmp_path / "off.nii")
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\xff" * (400 - 348))
            fh.write(data.ravel(order="F").tobytes())
        assert np.array_equal(load_volume(path).data, data)

    def test_rejects_bad_headers(self, tmp_path):
        path = str(tmp_path / "bad.nii")
        open(path, "wb").write(b"\x00" * 100)
        with pytest.raises(LoadError, match="truncated header"):
            load_volume(path)
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 347)
        open(path, "wb").write(bytes(hdr))
        with pytest.raises(LoadError, match="sizeof_hdr"):
            load_volume(path)

    def test_rejects_4d(self, tmp_path):
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 4, 2, 2, 2, 5, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 4, 16)
        struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        path = str(tmp_path / "4d.nii")
        open(path, "wb").write(bytes(hdr))
        with pytest.raises(LoadError, match="only 3D"):
            load_volume(path)

    def test_trailing_singleton_dims_allowed(self, tmp_path):
        data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 4, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 4, 16)
        struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        struct.pack_into("<3f", hdr, 108, 348.0, 0.0, 0.0)
        path = str(tmp_path / "4d1.nii")
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(data.ravel(order="F").tobytes())
        assert np.array_equal(load_volume(path).data, data)

    def test_unknown_datatype_code(self, tmp_path):
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 64, 64)  # float64: unsupported
        struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        path = str(tmp_path / "f64.nii")
        open(path, "wb").write(bytes(hdr))
        with pytest.raises(LoadError, match="unknown dtype code 64"):
            load_volume(path)


class TestMasks:
    @pytest.mark.parametrize("ext", ["raw", "nii"])
    def test_round_trip(self, tmp_path, ext):
        rng = np.random.default_rng(3)
        m = Mask(rng.random((4, 3, 2)) < 0.5, SPACING)
        path = str(tmp_path / ("m." + ext))
        save_mask(m, path)
        back = load_mask(path)
        assert np.array_equal(back.data, m.data)
        assert back.spacing == pytest.approx(m.spacing, abs=1e-6)

    def test_saved_as_u8(self, tmp_path):
        m = Mask(np.ones((2, 2, 2), dtype=bool), SPACING)
        path = str(tmp_path / "m.raw")
        save_mask(m, path)
        assert "dtype=u8" in open(path + ".meta").read()
        assert open(path, "rb").read() == b"\x01" * 8

    def test_any_nonzero_is_foreground(self, tmp_path):
        path = str(tmp_path / "m.raw")
        open(path, "wb").write(bytes([0, 1, 2, 255]))
        open(path + ".meta", "w").write("dims=4,1,1\nspacing=1,1,1\ndtype=u8\n")
        assert load_mask(path).data.ravel().tolist() == [False, True, True, True]
