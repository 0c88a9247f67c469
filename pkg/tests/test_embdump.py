import struct

import numpy as np
import pytest

from reidmetric.embdump import read_dump, sidecar_path, write_dump
from reidmetric.errors import ParseError
from reidmetric.numkit import l2_normalize, make_rng


def test_round_trip_bit_exact(tmp_path):
    emb = l2_normalize(make_rng(0).standard_normal((7, 256)))
    p = tmp_path / "e.emb"
    write_dump(p, emb, np.arange(7) * 3, np.arange(7) % 2)
    d = read_dump(p)
    assert d.dim == 256 and len(d) == 7
    np.testing.assert_array_equal(d.embeddings, emb.astype(np.float32))
    np.testing.assert_allclose(np.linalg.norm(d.embeddings, axis=1), 1.0, atol=1e-5)
    assert d.person_ids.tolist() == [0, 3, 6, 9, 12, 15, 18]
    buf = p.read_bytes()
    assert buf[:6] == b"RMEMB1" and struct.unpack("<2I", buf[6:14]) == (7, 256)
    write_dump(tmp_path / "f.emb", d.embeddings, d.person_ids, d.camera_ids)
    assert (tmp_path / "f.emb").read_bytes() == buf
    assert open(sidecar_path(p)).readline() == "0,0,0\n"


def test_errors(tmp_path):
    p = tmp_path / "e.emb"
    with pytest.raises(ValueError):
        write_dump(p, np.ones((2, 3)), [0], [0, 0])
    write_dump(p, np.ones((2, 3)), [0, 1], [0, 0])
    open(sidecar_path(p), "w").write("0,0,0\n")
    with pytest.raises(ParseError):
        read_dump(p)
    open(sidecar_path(p), "w").write("0,0,0\n2,1,0\n")
    with pytest.raises(ParseError):
        read_dump(p)
    p.write_bytes(b"RMEMB1" + struct.pack("<2I", 2, 3) + b"\x00" * 4)
    with pytest.raises(ParseError):
        read_dump(p)
    p.write_bytes(b"garbage")
    with pytest.raises(ParseError):
        read_dump(p)
