import numpy as np
import pandas as pd
import pytest

from edgecast.dataset import (
    DatasetIntegrityError,
    DatasetParseError,
    SplitSpec,
    build_personas,
    canonical_bytes,
    label_interactions,
    load_canonical,
    load_dataset,
    sample_unwatched,
    save_canonical,
    split,
    train_size,
)


def write_csv_dataset(root, ratings=None, users=None, items=None):
    root.mkdir(parents=True, exist_ok=True)
    (root / "users.csv").write_text(users or "user_id,age,gender,occupation,zip\n1,30,F,writer,11111\n2,40,M,doctor,22222\n3,25,F,student,33333\n")
    (root / "items.csv").write_text(items or "item_id,title,release_year,genres\n10,A,1995,Drama|Comedy\n11,B,,Action\n12,C,1999,\n13,D,1980,Drama\n")
    (root / "ratings.csv").write_text(ratings or (
        "user_id,item_id,rating,timestamp\n1,10,5,100\n1,11,3,101\n2,10,4,102\n2,12,1,103\n3,13,2,104\n3,10,4,105\n"
    ))
    return root


@pytest.fixture
def tiny(tmp_path):
    return load_dataset(write_csv_dataset(tmp_path / "tiny"), "csv")


def test_csv_loader(tiny):
    assert tiny.n_users == 3 and tiny.n_items == 4 and len(tiny.ratings) == 6
    assert tiny.genres == ("Action", "Comedy", "Drama")
    items = tiny.items.set_index("item_id")
    assert items.loc[10, "Drama"] == 1 and items.loc[10, "Action"] == 0
    assert np.isnan(items.loc[11, "release_year"])


def test_labels_use_inclusive_threshold(tiny):
    lab = label_interactions(tiny, 4.0)
    assert list(lab.label) == [1, 0, 1, 0, 0, 1]
    with pytest.raises(ValueError):
        label_interactions(tiny, 6)


def test_parse_error_names_file_and_line(tmp_path):
    root = write_csv_dataset(tmp_path / "bad", ratings="user_id,item_id,rating,timestamp\n1,10,5,100\n1,11,x,101\n")
    with pytest.raises(DatasetParseError) as err:
        load_dataset(root, "csv")
    assert "ratings.csv:3" in str(err.value)


def test_rating_out_of_range(tmp_path):
    root = write_csv_dataset(tmp_path / "bad", ratings="user_id,item_id,rating,timestamp\n1,10,7,100\n")
    with pytest.raises(DatasetParseError, match="outside"):
        load_dataset(root, "csv")


def test_bad_header(tmp_path):
    root = write_csv_dataset(tmp_path / "bad", ratings="u,i,r,t\n1,10,5,100\n")
    with pytest.raises(DatasetParseError, match="header"):
        load_dataset(root, "csv")


def test_dangling_and_duplicate_ratings(tmp_path):
    root = write_csv_dataset(tmp_path / "a", ratings="user_id,item_id,rating,timestamp\n9,10,5,100\n")
    with pytest.raises(DatasetIntegrityError, match="unknown user_id"):
        load_dataset(root, "csv")
    root = write_csv_dataset(tmp_path / "b", ratings="user_id,item_id,rating,timestamp\n1,10,5,100\n1,10,4,101\n")
    with pytest.raises(DatasetIntegrityError, match="duplicate rating"):
        load_dataset(root, "csv")


def test_missing_directory_and_format(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
    with pytest.raises(ValueError, match="unknown dataset format"):
        load_dataset(tmp_path, "parquet")


def test_ml100k_wrong_field_count(tmp_path):
    root = tmp_path / "ml"
    root.mkdir()
    (root / "u.data").write_text("1\t1\t5\n")
    (root / "u.user").write_text("1|24|M|technician|85711\n")
    (root / "u.item").write_text("1|Toy Story (1995)|01-Jan-1995||http://x|" + "|".join(["0"] * 19) + "\n")
    with pytest.raises(DatasetParseError, match="u.data:1"):
        load_dataset(root)


def test_canonical_roundtrip(tiny, tmp_path):
    path = tmp_path / "c.json"
    save_canonical(tiny, path)
    back = load_canonical(path)
    assert canonical_bytes(back) == canonical_bytes(tiny)
    shuffled = type(tiny)(tiny.users.iloc[::-1], tiny.items.iloc[::-1], tiny.ratings.iloc[::-1], tiny.genres)
    assert canonical_bytes(shuffled) == canonical_bytes(tiny)


def test_canonical_version_checked(tiny, tmp_path):
    path = tmp_path / "c.json"
    path.write_bytes(canonical_bytes(tiny).replace(b'"version":1', b'"version":99'))
    with pytest.raises(DatasetParseError, match="version"):
        load_canonical(path)


def test_personas(tiny):
    p = build_personas(tiny)
    assert p.loc[1, "count"] == 2
    assert p.loc[1, "mean_rating"] == 4.0
    assert p.loc[1, "frac_Drama"] == 0.5
    sub = build_personas(tiny, tiny.ratings[tiny.ratings.user_id != 3][["user_id", "item_id"]])
    assert sub.loc[3].eq(0).all()


def test_train_size_rounding():
    assert train_size(10, 0.8) == 8
    assert train_size(5, 0.5) == 3
    assert train_size(7, 0.5) == 4


def test_split_is_partition_and_seeded(tiny):
    lab = label_interactions(tiny)
    tr, te, new = split(tiny, lab, SplitSpec(0.5, seed=3, new_per_user=2))
    assert len(tr) == 3 and len(te) == 3
    both = pd.concat([tr, te])
    assert not both.duplicated(["user_id", "item_id"]).any() and len(both) == len(lab)
    tr2, te2, new2 = split(tiny, lab, SplitSpec(0.5, seed=3, new_per_user=2))
    pd.testing.assert_frame_equal(tr, tr2)
    pd.testing.assert_frame_equal(new, new2)
    assert new.label.isna().all()
    watched = set(zip(tiny.ratings.user_id, tiny.ratings.item_id))
    assert not any((u, m) in watched for u, m in zip(new.user_id, new.item_id))


def test_sample_unwatched_short_pool(tiny, caplog):
    out = sample_unwatched(tiny, [1], 5, np.random.default_rng(0))
    assert sorted(out.item_id) == [12, 13]
    assert "fewer than" in caplog.text


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(1.0)


def test_ml100k_counts(ml100k):
    assert ml100k.n_users == 943
    assert ml100k.n_items == 1682
    assert len(ml100k.ratings) == 100_000
    assert len(ml100k.genres) == 19
    assert ml100k.ratings.groupby("user_id").size().min() >= 20
