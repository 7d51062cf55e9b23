from duet.gradcheck import CASES, COMPOSITE_TOLERANCE, gradient_suite


def test_full_gradient_suite() -> None:
    results = gradient_suite(seed=0)
    assert [r.name for r in results] == [entry.name for entry in CASES]
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert not failed
    assert max(r.error for r in results) < COMPOSITE_TOLERANCE


def test_suite_with_another_seed() -> None:
    names = ['human_branch', 'human_branch_empty_parts', 'latent_branch_masked', 'dpb_forward',
             'batch_hard_triplet']
    results = gradient_suite(seed=7, names=names)
    assert all(r.passed for r in results)
