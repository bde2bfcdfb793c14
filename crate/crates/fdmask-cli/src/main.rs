fn main() {
    println!("fdmask");
}
