from . import ablate, cluster, elbow, embed, evaluate, route_stats, train

COMMANDS = [embed, cluster, elbow, train, evaluate, route_stats, ablate]
