import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confvio.errors import DataFormatError
from confvio.kitti_io import load_tracks
from confvio.tracks import TrackSet, read_tracks_csv, write_tracks_csv

THREE_FRAME_CSV = """frame,track_id,u,v
1,10,100.0,50.0
2,10,101.0,50.5
3,10,102.5,51.0
1,11,300.0,80.0
2,11,302.0,81.0
3,11,304.0,82.0
3,12,500.0,90.0
"""


@pytest.fixture
def three_frame_file(tmp_path):
    p = tmp_path / "tracks.csv"
    p.write_text(THREE_FRAME_CSV)
    return p


def test_two_triples_at_frame_three(three_frame_file):
    tracks = load_tracks(three_frame_file)
    triples = tracks.triples_at(3)
    assert [t.track_id for t in triples] == [10, 11]
    t10 = triples[0]
    np.testing.assert_array_equal(t10.uv1, [102.5, 51.0])
    np.testing.assert_array_equal(t10.uv3, [100.0, 50.0])
    assert t10.age == 3


def test_directory_argument_finds_tracks_csv(three_frame_file):
    assert len(load_tracks(three_frame_file.parent)) == 3


def test_empty_file_is_empty_set(tmp_path):
    p = tmp_path / "tracks.csv"
    p.write_text("")
    tracks = load_tracks(p)
    assert len(tracks) == 0 and tracks.triples_at(3) == []


def test_header_only_is_empty_set(tmp_path):
    p = tmp_path / "tracks.csv"
    p.write_text("frame,track_id,u,v\n")
    assert len(load_tracks(p)) == 0


def test_row_order_does_not_matter(tmp_path, three_frame_file):
    header, *rows = THREE_FRAME_CSV.strip().splitlines()
    shuffled = tmp_path / "shuffled.csv"
    shuffled.write_text("\n".join([header, *reversed(rows)]) + "\n")
    a, b = load_tracks(three_frame_file), load_tracks(shuffled)
    assert a.to_rows() == b.to_rows()
    assert [t.track_id for t in a.triples_at(3)] == [t.track_id for t in b.triples_at(3)]


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DataFormatError, match="nope.csv"):
        read_tracks_csv(tmp_path / "nope.csv")


def test_bad_header(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c,d\n1,2,3,4\n")
    with pytest.raises(DataFormatError, match="header"):
        read_tracks_csv(p)


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("frame,track_id,u,v\n1,2,3,4\n1,3,x,4\n")
    with pytest.raises(DataFormatError, match=":3:"):
        read_tracks_csv(p)


def test_duplicate_observation_rejected():
    with pytest.raises(DataFormatError):
        TrackSet.from_rows([1, 1], [5, 5], [(0, 0), (1, 1)])


def test_gap_breaks_triple():
    tracks = TrackSet.from_rows([1, 3, 4], [7, 7, 7], [(0, 0), (1, 1), (2, 2)])
    assert tracks.triples_at(4) == []


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 30), st.floats(0, 1000), st.floats(0, 400)),
                unique_by=lambda r: (r[0], r[1]), max_size=60))
def test_csv_roundtrip(tmp_path_factory, rows):
    tracks = TrackSet.from_rows([r[0] for r in rows], [r[1] for r in rows], [(r[2], r[3]) for r in rows])
    p = tmp_path_factory.mktemp("rt") / "tracks.csv"
    write_tracks_csv(tracks, p)
    assert read_tracks_csv(p).to_rows() == tracks.to_rows()
