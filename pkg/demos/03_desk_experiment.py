"""One seed of the desk-scale experiment: train, retrieve and compare the
four inference variants on rare-class and all-class AbsRel. Takes about
five minutes on a laptop CPU."""

import sys

from radepth.experiment import VARIANTS, run_seed

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
r = run_seed(seed)

print("seed %d, rare classes %s, %.0f s" % (seed, r.rare_classes, r.seconds))
print("%-13s %10s %10s" % ("variant", "rare", "all"))
for v in VARIANTS:
    print("%-13s %10.4f %10.4f" % (v, r.rare_absrel[v], r.all_absrel[v]))
base = r.rare_absrel["baseline"]
print("rare AbsRel change with retrieval: %+.1f%%" % (100 * (r.rare_absrel["rad"] / base - 1)))
print("retrieved a context containing the rare class:", r.diagnostics["rare_hit_rate"])
