import math

import numpy as np
import pytest

import helpers
from klpnet import lis, synthgen
from klpnet.geometry import BBox
from klpnet.lis import ConstraintError, Detection, Instance, InstanceTemplate

SQUARE = InstanceTemplate(0, "square", [(-0.35, -0.35), (0.35, -0.35), (0.35, 0.35), (-0.35, 0.35)],
                          [[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]])
TEMPLATES = {0: SQUARE}
E = np.eye(4)


def square_dets(x0, y0, side, slots=(0, 1, 2, 3), feats=E):
    corners = [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]
    return [Detection(*corners[s], 0, feats[s], s) for s in slots]


class TestTemplate:
    def test_skeleton_must_be_symmetric(self):
        with pytest.raises(ValueError):
            InstanceTemplate(0, "bad", [(0, 0), (1, 1)], [[0, 1], [0, 0]])

    def test_k_at_least_two(self):
        with pytest.raises(ValueError):
            InstanceTemplate(0, "dot", [(0, 0)], [[0]])

    def test_edges(self):
        assert SQUARE.edges() == [(0, 1), (0, 3), (1, 2), (2, 3)]


class TestClassify:
    def test_disjoint_all_fixed(self):
        dets = square_dets(10, 10, 10) + square_dets(50, 50, 10)
        inst = [Instance(BBox(8, 8, 22, 22), 0), Instance(BBox(48, 48, 62, 62), 0)]
        nodes = lis.classify_nodes(dets, inst)
        assert len(nodes.fixed) == 8 and not nodes.debatable and not nodes.outliers
        assert [f.instance for f in nodes.fixed] == [0] * 4 + [1] * 4

    def test_overlap_debatable(self):
        inst = [Instance(BBox(0, 0, 10, 10), 0), Instance(BBox(5, 0, 15, 10), 0)]
        nodes = lis.classify_nodes([Detection(7, 5, 0, E[0], 0)], inst)
        assert nodes.debatable[0].candidates == [0, 1]

    def test_cross_category_overlap_fixed(self):
        inst = [Instance(BBox(0, 0, 10, 10), 0), Instance(BBox(5, 0, 15, 10), 1)]
        nodes = lis.classify_nodes([Detection(7, 5, 1, E[0], 2)], inst)
        assert nodes.fixed[0].instance == 1 and not nodes.debatable

    def test_outside_is_outlier(self):
        nodes = lis.classify_nodes([Detection(50, 50, 0, E[0], 0)], [Instance(BBox(0, 0, 10, 10), 0)])
        assert nodes.outliers == [0]

    def test_unknown_or_duplicate_slot(self):
        inst = [Instance(BBox(0, 0, 10, 10), 0)]
        dets = [Detection(1, 1, 0, E[0], 0), Detection(2, 2, 0, E[0], 0), Detection(3, 3, 0, E[1], None)]
        nodes = lis.classify_nodes(dets, inst)
        assert [f.index for f in nodes.fixed] == [0]
        assert [d.index for d in nodes.debatable] == [1, 2]


class TestCandidateScore:
    def test_perfect_node(self):
        box = BBox(-2.5, -2.5, 12.5, 12.5)
        pts = SQUARE.layout * box.diagonal + 5.0
        nodes = lis.SceneNodes([Instance(box, 0), Instance(box, 0)])
        nodes.fixed = [lis.FixedNode(s, tuple(pts[s]), E[s], s, 0) for s in (0, 1, 3)]
        # same-slot reference from the second instance defines the mean feature
        nodes.fixed.append(lis.FixedNode(3, (0.0, 0.0), E[2], 2, 1))
        node = lis.DebatableNode(4, tuple(pts[2]), E[2], [0])
        assert lis.candidate_score(node, 0, 2, nodes, TEMPLATES) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_feature(self):
        box = BBox(0, 0, 10, 10)
        nodes = lis.SceneNodes([Instance(box, 0), Instance(box, 0)])
        nodes.fixed.append(lis.FixedNode(0, (5.0, 5.0), E[2], 2, 1))
        node = lis.DebatableNode(1, (5.0, 5.0), E[0], [0])
        # instance 0 has no fixed nodes: feature term only, cosine 0
        assert lis.candidate_score(node, 0, 2, nodes, TEMPLATES) == 0.0

    def test_hand_two_instances(self):
        b0, b1 = BBox(0, 0, 6, 8), BBox(3, 0, 9, 8)        # diagonals 10
        nodes = lis.SceneNodes([Instance(b0, 0), Instance(b1, 0)])
        nodes.fixed = [lis.FixedNode(0, (0.0, 0.0), np.array([1.0, 0, 0, 0]), 0, 0),
                       lis.FixedNode(1, (9.0, 8.0), np.array([0, 0, 1.0, 0]), 2, 1),
                       lis.FixedNode(2, (3.0, 8.0), np.array([1.0, 1.0, 0, 0]), 0, 1)]
        node = lis.DebatableNode(3, (6.0, 8.0), np.array([1.0, 1.0, 0, 0]), [0, 1])
        # slot 0 on instance 1: refs are both slot-0 fixed features, mean (1, .5, 0, 0)
        #   cos = 1.5 / (sqrt2 * sqrt1.25); distances: to (9,8) 3/10 vs layout |s0-s2| = 0.7*sqrt2,
        #   to (3,8) 3/10 vs layout 0
        cos = 1.5 / (math.sqrt(2) * math.sqrt(1.25))
        dev = (abs(0.3 - 0.7 * math.sqrt(2)) + abs(0.3 - 0.0)) / 2
        assert lis.candidate_score(node, 1, 0, nodes, TEMPLATES) == pytest.approx(cos - dev, abs=1e-12)
        # slot 2 on instance 0: one ref (0,0,1,0) -> cos 0; distance 10/10 vs layout 0.7*sqrt2
        dev0 = abs(1.0 - 0.7 * math.sqrt(2))
        assert lis.candidate_score(node, 0, 2, nodes, TEMPLATES, lam_d=2.0) == pytest.approx(-2 * dev0, abs=1e-12)

    def test_matches_oracle(self):
        gen = helpers.rng(1)
        templates = synthgen.template_map()
        for _ in range(30):
            _, _, nodes = helpers.occlusion_scene(gen)
            vac = lis.vacancies(nodes, templates)
            for node in nodes.debatable:
                for inst in node.candidates:
                    for slot in vac[inst]:
                        got = lis.candidate_score(node, inst, slot, nodes, templates)
                        assert got == pytest.approx(helpers.score_oracle(node, inst, slot, nodes, templates),
                                                    abs=1e-12)


class TestResolve:
    def test_no_debatable(self):
        dets = square_dets(0, 0, 10)
        nodes = lis.classify_nodes(dets, [Instance(BBox(-1, -1, 11, 11), 0)])
        a = lis.resolve(nodes, TEMPLATES)
        assert a.choice == {} and a.score == 0.0 and a.unfilled == {}

    def test_single_forced(self):
        dets = square_dets(0, 0, 10, slots=(0, 1, 2)) + [Detection(0, 10, 0, E[3], None)]
        nodes = lis.classify_nodes(dets, [Instance(BBox(-1, -1, 11, 11), 0)])
        assert lis.resolve(nodes, TEMPLATES).choice == {3: (0, 3)}

    def test_two_vacancies_three_nodes(self):
        # each instance misses slot 3; three debatable candidates in the overlap
        b0, b1 = BBox(-1, -1, 11, 11), BBox(4, -1, 16, 11)
        dets = square_dets(0, 0, 10, slots=(0, 1, 2)) + square_dets(5, 0, 10, slots=(0, 1, 2))
        # the three extra nodes lie inside both boxes
        dets += [Detection(5, 10, 0, E[3], None), Detection(10, 10, 0, E[3] + 0.2 * E[0], None),
                 Detection(8, 5, 0, E[1], None)]
        nodes = lis.classify_nodes(dets, [Instance(b0, 0), Instance(b1, 0)])
        assert len(nodes.debatable) >= 3
        a = lis.resolve(nodes, TEMPLATES)
        fill, best = helpers.brute_force_resolve(nodes, TEMPLATES)
        assert a.score == pytest.approx(best, abs=1e-12)
        assert a.choice[8] is lis.OUTLIER
        assert helpers.node_counts(nodes, a) == {0: 4, 1: 4}

    def test_infeasible(self):
        nodes = lis.SceneNodes([Instance(BBox(0, 0, 10, 10), 0)])
        nodes.fixed = [lis.FixedNode(i, (1.0, 1.0), E[0], i % 4, 0) for i in range(5)]
        with pytest.raises(ConstraintError, match="instance 0"):
            lis.resolve(nodes, TEMPLATES)

    def test_brute_force_equivalence(self):
        gen = helpers.rng(2)
        templates = synthgen.template_map()
        for _ in range(60):
            _, _, nodes = helpers.occlusion_scene(gen)
            a = lis.resolve(nodes, templates)
            fill, best = helpers.brute_force_resolve(nodes, templates)
            assert a.exhaustive
            assert a.score == pytest.approx(best, abs=1e-12)
            assert sum(c is not None for c in a.choice.values()) == fill
            assert all(c == templates[nodes.instances[i].category].k
                       for i, c in helpers.node_counts(nodes, a).items())

    def test_greedy_keeps_counts(self):
        gen = helpers.rng(3)
        templates = synthgen.template_map()
        seen = 0
        while seen < 5:
            _, _, nodes = helpers.occlusion_scene(gen, max_debatable=20, max_vacancies=40)
            if len(nodes.debatable) <= lis.EXHAUSTIVE_MAX_NODES:
                continue
            seen += 1
            a = lis.resolve(nodes, templates)
            assert not a.exhaustive
            assert all(c == templates[nodes.instances[i].category].k
                       for i, c in helpers.node_counts(nodes, a).items())

    def test_translation_scale_invariant(self):
        gen = helpers.rng(4)
        templates = synthgen.template_map()
        for _ in range(10):
            _, dets, nodes = helpers.occlusion_scene(gen)
            a = lis.resolve(nodes, templates)
            s, tx, ty = 2.5, 13.0, -7.0
            moved = [Detection(d.x * s + tx, d.y * s + ty, d.category, d.feature, d.slot) for d in dets]
            inst = [Instance(BBox(i.bbox.x_min * s + tx, i.bbox.y_min * s + ty,
                                  i.bbox.x_max * s + tx, i.bbox.y_max * s + ty), i.category)
                    for i in nodes.instances]
            b = lis.resolve(lis.classify_nodes(moved, inst), templates)
            assert a.choice == b.choice
            assert a.score == pytest.approx(b.score, abs=1e-9)

    def test_deterministic(self):
        _, _, nodes = helpers.occlusion_scene(helpers.rng(5))
        t = synthgen.template_map()
        assert lis.resolve(nodes, t) == lis.resolve(nodes, t)


class TestPrune:
    def setup_scene(self):
        dets = square_dets(0, 0, 10) + square_dets(40, 0, 10)
        inst = [Instance(BBox(-1, -1, 11, 11), 0), Instance(BBox(39, -1, 51, 11), 0)]
        dets.append(Detection(100, 100, 0, E[0], 0))
        nodes = lis.classify_nodes(dets, inst)
        return nodes, lis.resolve(nodes, TEMPLATES)

    def test_skeleton_unchanged(self):
        nodes, a = self.setup_scene()
        links = {(0, 1), (1, 2), (2, 3), (0, 3), (4, 5)}
        assert lis.prune_links(links, nodes, a, TEMPLATES) == links

    def test_cross_instance_removed(self):
        nodes, a = self.setup_scene()
        assert lis.prune_links({(0, 4), (1, 5)}, nodes, a, TEMPLATES) == set()

    def test_outlier_removed(self):
        nodes, a = self.setup_scene()
        assert lis.prune_links({(0, 8)}, nodes, a, TEMPLATES) == set()

    def test_off_skeleton_removed(self):
        nodes, a = self.setup_scene()
        assert lis.prune_links({(0, 2), (1, 3), (0, 1)}, nodes, a, TEMPLATES) == {(0, 1)}

    def test_random_oracle(self):
        gen = helpers.rng(6)
        templates = synthgen.template_map()
        for _ in range(40):
            _, dets, nodes = helpers.occlusion_scene(gen)
            a = lis.resolve(nodes, templates)
            links = helpers.random_links(gen, len(dets))
            got = lis.prune_links(links, nodes, a, templates)
            assert got == helpers.skeleton_links(links, nodes, a, templates)
            assert got <= {tuple(sorted(e)) for e in links}
