"""From inferred-state logs to a normalized behavior tensor."""

# %% Simulated logs for a small cohort over two weeks
from behavtensor.featurize import default_schema, simulate_events, tensorize

schema = default_schema(n_days=14)
records = simulate_events(n_users=10, schema=schema, seed=0)
print(len(records), "records,", len(schema.variables), "variables per user-day")

# %% Build, normalize and impute
final, raw = tensorize(records, schema)
print("dims", final.tensor.dims)
print(f"missing before imputation: {100 * raw.missing_fraction:.1f}%")
print("cells filled:", sum(final.imputed.values()))

# %% A look at one user's morning walking over the first week
j = final.variables.index("activity.walk.duration.morning")
print(final.individuals[0], raw.tensor.values[0, j, :7].round(1))
print("normalized:", final.tensor.values[0, j, :7].round(3))
