import numpy as np
import pytest
from pydantic import ValidationError

from geometry import IouKind, center_distance, edge_feature, gap_distance, iou_family, overlap_ratio
from graph import (
    GRAPHS,
    EdgeSet,
    GraphError,
    PruneConfig,
    SparsityToggles,
    bucket_tsg_sparsity,
    build_edges,
    build_scene_graph,
    dataset_sparsity,
    export_graph,
    keep_masks_from_export,
    parse_graph_export,
    prune_osg,
    prune_otsg,
    prune_tsg,
    sparsity_ratio,
    sweep_sparsity,
    tsg_mask,
)
from scene import LayoutFamily, SynthSpec, generate_scene, synth_generate

from conftest import make_scene


def random_scene(seed, n_objects=6, n_tokens=8, size=200.0):
    rng = np.random.default_rng(seed)

    def boxes(n, lo, hi):
        out = []
        for _ in range(n):
            w, h = rng.uniform(lo, hi, 2)
            x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
            out.append((round(x, 3), round(y, 3), round(x + w, 3), round(y + h, 3)))
        return out

    return make_scene(
        objects=[(b, f"obj{i}") for i, b in enumerate(boxes(n_objects, 10, 80))],
        tokens=[(b, f"tok{i}") for i, b in enumerate(boxes(n_tokens, 3, 25))],
        width=size,
        height=size,
    )


def test_build_edges_features_and_self_loops(tiny_scene):
    objs, toks = tiny_scene.objects, tiny_scene.tokens
    vv = build_edges(objs, objs)
    assert vv.shape == (2, 2) and vv.kept == 2
    assert not vv.keep[0, 0] and not vv.keep[1, 1]
    assert np.all(vv.features[0, 0] == 0)
    tv = build_edges(toks, objs)
    assert tv.kept == 4
    assert list(tv.features[1, 0]) == edge_feature(toks[1].box, objs[0].box)


def test_otsg_matches_scalar_rule():
    cfg = PruneConfig(theta=0.3)
    for seed in range(5):
        scene = random_scene(seed)
        pruned = prune_otsg(build_edges(scene.tokens, scene.objects), scene.tokens, scene.objects, scene.d_img, cfg)
        for i, t in enumerate(scene.tokens):
            for j, o in enumerate(scene.objects):
                expected = center_distance(t.box, o.box) <= cfg.theta * scene.d_img or iou_family(
                    "diou", t.box, o.box
                ) >= cfg.theta
                assert pruned.keep[i, j] == expected


@pytest.mark.parametrize("kind", list(IouKind))
def test_osg_matches_scalar_rule(kind):
    cfg = PruneConfig(theta=0.4, epsilon=0.1, osg_iou_kind=kind)
    for seed in range(5):
        scene = random_scene(seed)
        objs = scene.objects
        pruned = prune_osg(build_edges(objs, objs), objs, scene.d_img, cfg)
        for i, a in enumerate(objs):
            for j, b in enumerate(objs):
                expected = i != j and (
                    center_distance(a.box, b.box) <= cfg.theta * scene.d_img
                    and iou_family(kind, a.box, b.box) <= cfg.epsilon
                )
                assert pruned.keep[i, j] == expected


def test_tsg_matches_receiver_relative_rule():
    cfg = PruneConfig(alpha=1.5, beta=0.5, gamma=1.5, delta=0.3)
    for seed in range(5):
        scene = random_scene(seed, n_tokens=12)
        toks, H = scene.tokens, scene.image_height
        pruned = prune_tsg(build_edges(toks, toks), toks, H, cfg)
        for j, s in enumerate(toks):
            for i, r in enumerate(toks):
                h_s, h_r = s.box.height / H, r.box.height / H
                expected = i != j and (
                    gap_distance(s.box, r.box) <= cfg.alpha * r.box.diagonal
                    and cfg.beta * h_r <= h_s <= cfg.gamma * h_r
                    and overlap_ratio(s.box, r.box) <= cfg.delta
                )
                assert pruned.keep[j, i] == expected


def test_tsg_is_asymmetric_in_height():
    scene = make_scene(tokens=[((0, 0, 10, 10), "big"), ((12, 0, 16, 3), "small")])
    cfg = PruneConfig(alpha=5, beta=0.1, gamma=0.5, delta=0.5)
    pruned = prune_tsg(build_edges(scene.tokens, scene.tokens), scene.tokens, scene.image_height, cfg)
    # small -> big keeps (0.03 within [0.01, 0.05]); big -> small does not
    assert pruned.keep[1, 0]
    assert not pruned.keep[0, 1]


def test_tsg_rejects_zero_height():
    flat = np.array([[0.0, 5.0, 10.0, 5.0], [0.0, 0.0, 4.0, 4.0]])
    with pytest.raises(GraphError, match="zero height"):
        tsg_mask(flat, flat, 100.0, PruneConfig())


def test_pruned_features_are_zeroed():
    scene = random_scene(3)
    sg = build_scene_graph(scene, PruneConfig(theta=0.1))
    for es in sg.edges.values():
        assert np.all(es.features[~es.keep] == 0.0)


def test_sparsity_ratio_counts():
    before = build_edges(random_scene(1).objects, random_scene(1).objects)
    mask = np.zeros(before.keep.shape, dtype=bool)
    mask[0, 1] = mask[2, 3] = True
    stats = sparsity_ratio(before, before.restrict(mask))
    assert stats.total == 30 and stats.pruned == 28
    assert stats.ratio == pytest.approx(28 / 30)
    with pytest.raises(GraphError):
        sparsity_ratio(before.restrict(mask), before)


def test_restrict_checks_shape():
    es = build_edges(random_scene(1).objects, random_scene(1).objects)
    with pytest.raises(GraphError):
        es.restrict(np.ones((2, 2), dtype=bool))


def test_unknown_ids_are_reported():
    scene = random_scene(2)
    es = build_edges(scene.objects, scene.objects)
    with pytest.raises(GraphError, match="not supplied"):
        prune_osg(es, scene.objects[:2], scene.d_img, PruneConfig())


def test_toggles_disable_pruning():
    scene = random_scene(4)
    sg = build_scene_graph(scene, PruneConfig(theta=0.1), SparsityToggles(otsg=False, osg=False, tsg=False))
    assert all(sg.stats[g].ratio == 0.0 for g in GRAPHS)
    assert sg.edges["tv"].kept == len(scene.tokens) * len(scene.objects)


def test_scene_graph_stats_combine_both_directions():
    scene = random_scene(5)
    sg = build_scene_graph(scene)
    n, m = len(scene.objects), len(scene.tokens)
    assert sg.stats["otsg"].total == 2 * n * m
    assert sg.stats["osg"].total == n * (n - 1)
    assert sg.stats["tsg"].total == m * (m - 1)


def test_scene_without_tokens():
    scene = make_scene(objects=[((0, 0, 10, 10), "a"), ((20, 20, 30, 30), "b")])
    sg = build_scene_graph(scene)
    assert sg.edges["tv"].shape == (0, 2)
    assert sg.stats["tsg"].total == 0 and sg.stats["tsg"].ratio == 0.0


def test_prune_config_validation():
    with pytest.raises(ValidationError):
        PruneConfig(beta=3.0, gamma=2.0)
    with pytest.raises(ValidationError):
        PruneConfig(theta=1.5)


def dense_scenes():
    return synth_generate(0, SynthSpec(scenes=6)) + [random_scene(s, n_objects=10, n_tokens=20) for s in range(6)]


@pytest.mark.parametrize(
    "unit, overrides",
    [
        ("vv", [{"theta": v} for v in (0.05, 0.1, 0.2, 0.4, 0.8)]),
        ("vv", [{"epsilon": v} for v in (0.0, 0.1, 0.3, 0.6, 1.0)]),
        ("tt", [{"alpha": v} for v in (0.25, 0.5, 1.0, 2.0, 8.0)]),
        ("tt", [{"delta": v} for v in (0.0, 0.1, 0.3, 0.6, 1.0)]),
        ("tt", [{"beta": b, "gamma": g} for b, g in ((0.8, 1.25), (0.6, 1.5), (0.4, 2.0), (0.2, 3.0), (0.1, 5.0))]),
    ],
)
def test_keep_sets_only_grow_as_thresholds_loosen(unit, overrides):
    grew = False
    for scene in dense_scenes():
        keeps = [build_scene_graph(scene, PruneConfig(**o)).edges[unit].keep for o in overrides]
        for prev, nxt in zip(keeps, keeps[1:]):
            assert not (prev & ~nxt).any()
            grew = grew or bool((nxt & ~prev).any())
    assert grew


def test_object_token_graph_is_not_monotone_in_theta():
    # a wide strip along the top of a full-image sign: DIoU 0.12, centers 0.28 * d_img apart
    scene = make_scene(objects=[((0, 0, 100, 100), "sign")], tokens=[((0, 0, 100, 20), "open")])
    kept = [build_scene_graph(scene, PruneConfig(theta=t)).edges["tv"].keep[0, 0] for t in (0.1, 0.2, 0.3)]
    assert kept == [True, False, True]


@pytest.mark.parametrize("factor", [2.0, 0.5])
@pytest.mark.parametrize("seed", range(5))
def test_object_token_pruning_ignores_image_scale(seed, factor):
    scene = random_scene(seed)

    def scaled(entities):
        return [([c * factor for c in e.box.to_list()], e.label) for e in entities]

    rescaled = make_scene(
        objects=scaled(scene.objects),
        tokens=scaled(scene.tokens),
        width=scene.image_width * factor,
        height=scene.image_height * factor,
    )
    for theta in (0.1, 0.3, 0.5):
        cfg = PruneConfig(theta=theta)
        a = prune_otsg(build_edges(scene.tokens, scene.objects), scene.tokens, scene.objects, scene.d_img, cfg)
        b = prune_otsg(build_edges(rescaled.tokens, rescaled.objects), rescaled.tokens, rescaled.objects, rescaled.d_img, cfg)
        assert np.array_equal(a.keep, b.keep)
        a = prune_otsg(build_edges(scene.objects, scene.tokens), scene.tokens, scene.objects, scene.d_img, cfg)
        b = prune_otsg(build_edges(rescaled.objects, rescaled.tokens), rescaled.tokens, rescaled.objects, rescaled.d_img, cfg)
        assert np.array_equal(a.keep, b.keep)


def test_sparsity_monotone_in_thresholds():
    scenes = synth_generate(0, SynthSpec(scenes=6))
    eps = [sr["osg"] for _, sr in sweep_sparsity(scenes, "epsilon", [0.0, 0.2, 0.5, 1.0])]
    assert eps == sorted(eps, reverse=True)
    alphas = [sr["tsg"] for _, sr in sweep_sparsity(scenes, "alpha", [0.5, 2.0, 8.0])]
    assert alphas == sorted(alphas, reverse=True)


def test_sweep_rejects_bad_requests():
    with pytest.raises(GraphError, match="unknown sweep parameter"):
        sweep_sparsity([], "zeta", [1])
    with pytest.raises(GraphError, match="beta"):
        sweep_sparsity([], "beta", [5.0])


def test_duplicate_objects_drop_their_shared_edge():
    spec = SynthSpec(scenes=1, layouts={LayoutFamily.DUPLICATE_BOXES: 1.0}, duplicate_jitter=1.0)
    scene, _ = generate_scene(3, 0, spec)
    sg = build_scene_graph(scene)
    for k in range(0, len(scene.objects), 2):
        assert not sg.edges["vv"].keep[k, k + 1]
        assert not sg.edges["vv"].keep[k + 1, k]


def test_storefront_distractors_lose_object_edges():
    spec = SynthSpec(scenes=3, layouts={LayoutFamily.STOREFRONT_ROWS: 1.0}, distractors_min=1, distractors_max=2)
    for i in range(spec.scenes):
        scene, _ = generate_scene(8, i, spec)
        sg = build_scene_graph(scene)
        W, H = scene.image_width, scene.image_height
        far = [k for k, t in enumerate(scene.tokens) if t.box.x_tl >= 0.9 * W - 1e-3 and t.box.y_tl >= 0.9 * H - 1e-3]
        assert far
        assert not sg.edges["tv"].keep[far, :].any()
        assert not sg.edges["vt"].keep[:, far].any()
        near = [k for k in range(len(scene.tokens)) if k not in far]
        assert not sg.edges["tt"].keep[np.ix_(far, near)].any()
        assert not sg.edges["tt"].keep[np.ix_(near, far)].any()


def test_dataset_sparsity_and_buckets():
    scenes = synth_generate(2, SynthSpec(scenes=8))
    sr = dataset_sparsity(scenes)
    assert set(sr) == set(GRAPHS)
    assert all(0.0 <= v <= 1.0 for v in sr.values())
    cutoff = int(np.median([len(s.tokens) for s in scenes]))
    buckets = bucket_tsg_sparsity(scenes, cutoff)
    assert set(buckets) == {f"<={cutoff}", f">{cutoff}"}
    assert sum(b["share"] for b in buckets.values()) == pytest.approx(1.0)
    assert sum(b["scenes"] for b in buckets.values()) == len(scenes)


def test_json_export_rebuilds_keep_masks():
    scene = random_scene(6)
    sg = build_scene_graph(scene, PruneConfig(theta=0.2))
    doc = parse_graph_export(export_graph(sg, "json"))
    assert len(doc.nodes) == len(scene.entities)
    masks = keep_masks_from_export(doc)
    for unit, es in sg.edges.items():
        assert np.array_equal(masks[unit], es.keep)
    tsg_only = parse_graph_export(export_graph(sg, "json", ["tsg"]))
    assert {e.graph for e in tsg_only.edges} <= {"tsg"}


def test_dot_export(tiny_scene):
    text = export_graph(build_scene_graph(tiny_scene), "dot").decode("utf-8")
    assert text.startswith("digraph ssgn {")
    assert 'n0 [shape=box, label="sign"];' in text
    assert 'n2 [shape=ellipse, label="stop"];' in text
    assert text.rstrip().endswith("}")


def test_export_rejects_unknown_requests(tiny_scene):
    sg = build_scene_graph(tiny_scene)
    with pytest.raises(GraphError):
        export_graph(sg, "xml")
    with pytest.raises(GraphError):
        export_graph(sg, "json", ["ksg"])
    with pytest.raises(GraphError, match="malformed"):
        parse_graph_export(b"{}")


def test_edge_set_is_frozen(tiny_scene):
    es = build_edges(tiny_scene.objects, tiny_scene.tokens)
    assert isinstance(es, EdgeSet)
    with pytest.raises(AttributeError):
        es.keep = None


@pytest.mark.slow
def test_thousand_scenes_match_scalar_rules():
    cfg = PruneConfig()
    for scene in synth_generate(11, SynthSpec(scenes=1000)):
        sg = build_scene_graph(scene, cfg)
        objs, toks, d_img, H = scene.objects, scene.tokens, scene.d_img, scene.image_height
        for i, t in enumerate(toks):
            for j, o in enumerate(objs):
                near = center_distance(t.box, o.box) <= cfg.theta * d_img
                expected = near or iou_family("diou", t.box, o.box) >= cfg.theta
                assert sg.edges["tv"].keep[i, j] == expected
                assert sg.edges["vt"].keep[j, i] == expected
        for i, a in enumerate(objs):
            for j, b in enumerate(objs):
                expected = i != j and (
                    center_distance(a.box, b.box) <= cfg.theta * d_img
                    and iou_family(cfg.osg_iou_kind, a.box, b.box) <= cfg.epsilon
                )
                assert sg.edges["vv"].keep[i, j] == expected
        for j, s in enumerate(toks):
            for i, r in enumerate(toks):
                h_s, h_r = s.box.height / H, r.box.height / H
                expected = i != j and (
                    gap_distance(s.box, r.box) <= cfg.alpha * r.box.diagonal
                    and cfg.beta * h_r <= h_s <= cfg.gamma * h_r
                    and overlap_ratio(s.box, r.box) <= cfg.delta
                )
                assert sg.edges["tt"].keep[j, i] == expected
