/// Scheduling class of a layer: ready sends go first so transfers overlap
/// local computation, ready receives go last so they block as late as possible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OrderClass {
    Send,
    Compute,
    Receive,
}

/// Topological order of a DAG given as per-node source lists, with ties
/// broken by class and then by node index.
///
/// On a cycle, returns the nodes of one cycle in edge order.
pub fn execution_order(classes: &[OrderClass], srcs: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let n = classes.len();
    let mut pending: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let mut consumers = vec![Vec::new(); n];
    for (i, list) in srcs.iter().enumerate() {
        for &s in list {
            consumers[s].push(i);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while !ready.is_empty() {
        let pick = (0..ready.len())
            .min_by_key(|&k| (classes[ready[k]], ready[k]))
            .expect("ready is nonempty");
        let i = ready.swap_remove(pick);
        order.push(i);
        for &c in &consumers[i] {
            pending[c] -= 1;
            if pending[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every unscheduled node still waits on some unscheduled source, so
    // walking source edges from one of them must revisit a node.
    let start = (0..n).find(|&i| pending[i] > 0).expect("some node is unscheduled");
    let mut path = vec![start];
    let mut at = start;
    loop {
        let next = *srcs[at]
            .iter()
            .find(|&&s| pending[s] > 0)
            .expect("unscheduled node has an unscheduled source");
        if let Some(pos) = path.iter().position(|&p| p == next) {
            let mut cycle = path.split_off(pos);
            cycle.reverse();
            return Err(cycle);
        }
        path.push(next);
        at = next;
    }
}
