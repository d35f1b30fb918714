import pytest

from mpix import Universe, comm_init, dist_graph_create_adjacent
from mpix.errors import ConfigurationError, TopologyError
from mpix.harness.patterns import stencil5


def comms(n, **kw):
    u = Universe(n, **kw)
    return u, [comm_init(ep) for ep in u.endpoints]


def test_local_group_two_nodes():
    _, cs = comms(4, node_map=[0, 0, 1, 1])
    c = cs[3]
    assert c.local_group == (2, 3) and c.local_index == 1 and c.n_nodes == 2


def test_single_rank():
    _, (c,) = comms(1)
    assert c.local_group == (0,) and c.n_nodes == 1


def test_contiguous_ppn_map():
    _, cs = comms(6, ppn=2)
    c = cs[4]
    assert c.node_of[4] == 4 // 2 == 2
    assert c.local_group == (4, 5)


def test_init_is_communication_free():
    u, _ = comms(8, ppn=4)
    assert u.snapshot_stats().total_msgs == 0


def test_explicit_map_missing_rank():
    u = Universe(2)
    with pytest.raises(ConfigurationError):
        comm_init(u.endpoints[1], node_map=[0])


def test_local_groups_partition_ranks():
    _, cs = comms(7, node_map=[0, 1, 0, 2, 1, 0, 2])
    groups = cs[0].node_groups
    assert sorted(r for g in groups for r in g) == list(range(7))
    assert all(list(g) == sorted(g) for g in groups)
    for c in cs:
        assert c.local_group[c.local_index] == c.rank


@pytest.mark.parametrize("group,remote,expected", [((0, 1), 3, 1), ((4, 5, 6), 0, 4)])
def test_leader_rotation(group, remote, expected):
    node_map = [0] * 4 + [1] * 3 + [2, 3]
    if group == (0, 1):
        node_map = [0, 0, 1, 1, 2, 2, 3, 3]
    u = Universe(len(node_map), node_map)
    c = comm_init(u.endpoints[group[0]])
    assert c.local_group == group
    assert c.leader_for(remote) == expected


def test_leader_each_local_rank_once_on_4x4():
    _, cs = comms(16, ppn=4)
    for node in range(4):
        picked = [cs[node * 4].leader_for(r) for r in range(4)]
        assert sorted(picked) == [node * 4 + i for i in range(4)]
        # every rank of the node agrees
        for c in cs[node * 4:(node + 1) * 4]:
            assert [c.leader_for(r) for r in range(4)] == picked


def test_leader_range_check():
    _, cs = comms(4, ppn=2)
    with pytest.raises(ConfigurationError):
        cs[0].leader_for(2)


def test_topology_empty_and_ring():
    _, cs = comms(4)
    t = dist_graph_create_adjacent(cs[0], [], None, [], None)
    assert t.indegree == t.outdegree == 0
    for c in cs:
        nb = [(c.rank - 1) % 4, (c.rank + 1) % 4]
        t = dist_graph_create_adjacent(c, nb, [1, 1], nb, [1, 1], reorder=True)
        assert t.sources == tuple(nb) and t.reorder is True


def test_topology_errors():
    _, cs = comms(4)
    with pytest.raises(TopologyError):
        dist_graph_create_adjacent(cs[0], [4], None, [], None)
    with pytest.raises(TopologyError):
        dist_graph_create_adjacent(cs[0], [1], [-1], [], None)
    with pytest.raises(TopologyError):
        dist_graph_create_adjacent(cs[0], [1, 2], [1], [], None)


def test_stencil_degrees_on_4x4():
    inst = stencil5(16, 1, 1, 0)
    out_deg = [len(inst.out_edges(r)) for r in range(16)]
    # grid oracle: count in-bounds N/S/E/W neighbors
    for r in range(16):
        i, j = divmod(r, 4)
        expect = sum(0 <= i + di < 4 and 0 <= j + dj < 4
                     for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)))
        assert out_deg[r] == expect
    assert out_deg[5] == 4 and out_deg[0] == 2
